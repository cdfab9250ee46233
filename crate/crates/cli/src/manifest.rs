//! Run manifests: everything needed to re-execute a command bit-exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::commands::{CliError, Command};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    /// The full command with every knob resolved to its effective value.
    pub command: Command,
    pub master_seed: u64,
    /// Worker threads in effect (`UNIPAINT_THREADS`), if set.
    pub threads: Option<String>,
    pub checkpoints: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Command-specific facts worth recording (e.g. resolved defaults).
    pub notes: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: Command, master_seed: u64) -> Self {
        Self {
            tool: "unipaint".into(),
            tool_version: TOOL_VERSION.into(),
            command,
            master_seed,
            threads: std::env::var("UNIPAINT_THREADS").ok(),
            checkpoints: Vec::new(),
            outputs: Vec::new(),
            notes: serde_json::Value::Null,
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

/// Manifest path for a file output: `<out>.manifest.json`.
pub fn beside(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Manifest path for a directory output.
pub fn inside(dir: &Path) -> PathBuf {
    dir.join("run_manifest.json")
}
