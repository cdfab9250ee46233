//! The denoiser: a small video U-Net with temporal mixture-of-experts blocks,
//! a mask-driven gating network, an inpainting adapter whose per-layer taps
//! are added into the base branch, and the latent codec.

mod codec;
mod net;

pub use codec::{decode_latent, depth_to_space, encode_latent, space_to_depth};
pub use net::{Binding, ForwardOptions, ForwardVars, GateOverride, LatentBundle, MoeLevel};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{rng_normal, RandomStream, Scalar, Tensor};
use crate::synthdata::VOCAB_SIZE;

/// Base-branch layers that can receive adapter features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Enc1,
    Enc2,
    Mid,
    Dec2,
    Dec1,
}

impl Site {
    pub const ALL: [Site; 5] = [Site::Enc1, Site::Enc2, Site::Mid, Site::Dec2, Site::Dec1];

    pub fn name(self) -> &'static str {
        match self {
            Site::Enc1 => "enc1",
            Site::Enc2 => "enc2",
            Site::Mid => "mid",
            Site::Dec2 => "dec2",
            Site::Dec1 => "dec1",
        }
    }

    /// Whether the site lives at the coarse (second) resolution level.
    fn coarse(self) -> bool {
        matches!(self, Site::Enc2 | Site::Mid | Site::Dec2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channels of the latent (4 × image channels for the space-to-depth codec).
    pub latent_channels: usize,
    /// Channel widths of the two resolution levels.
    pub widths: [usize; 2],
    /// Width of the timestep embedding.
    pub temb_dim: usize,
    /// Number of experts in every MoE block.
    pub experts: usize,
    /// Expert hidden width as a multiple of the block width.
    pub expert_mult: usize,
    /// Channel width of the gate's 3D convolutions.
    pub gate_width: usize,
    /// Number of stride-2 3D convolutions in the gate.
    pub gate_layers: usize,
    /// Base layers that receive adapter features.
    pub injection_sites: Vec<Site>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_channels: 12,
            widths: [32, 64],
            temb_dim: 64,
            experts: 4,
            expert_mult: 4,
            gate_width: 8,
            gate_layers: 3,
            injection_sites: vec![Site::Enc1, Site::Enc2, Site::Mid],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_channels", self.latent_channels),
            ("widths[0]", self.widths[0]),
            ("widths[1]", self.widths[1]),
            ("temb_dim", self.temb_dim),
            ("experts", self.experts),
            ("expert_mult", self.expert_mult),
            ("gate_width", self.gate_width),
            ("gate_layers", self.gate_layers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model config: {name} must be positive")));
        }
        let mut sites = self.injection_sites.clone();
        sites.sort();
        sites.dedup();
        if sites.len() != self.injection_sites.len() {
            return Err(Error::invalid("model config: duplicate injection site"));
        }
        Ok(())
    }

    /// Channel width of the base activation at `site`.
    pub fn site_width(&self, site: Site) -> usize {
        if site.coarse() {
            self.widths[1]
        } else {
            self.widths[0]
        }
    }
}

/// Whether a parameter stays trainable in stage 2: temporal/MoE blocks (in
/// both branches), the gate, and the adapter taps.
pub fn stage2_trainable(name: &str) -> bool {
    name.contains(".moe.") || name.contains(".temporal.") || name.starts_with("gate.") || name.starts_with("adapter.tap.")
}

/// Named parameter store plus architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel<F> {
    config: ModelConfig,
    params: BTreeMap<String, Tensor<F>>,
}

struct Specs {
    list: Vec<(String, Vec<usize>, Init)>,
    temb: usize,
}

impl Specs {
    fn push(&mut self, name: &str, shape: Vec<usize>, init: Init) {
        self.list.push((name.to_string(), shape, init));
    }

    fn lin(&mut self, name: &str, i: usize, o: usize, zero: bool) {
        self.push(&format!("{name}.w"), vec![i, o], if zero { Init::Zero } else { Init::Fan(i) });
        self.push(&format!("{name}.b"), vec![o], Init::Zero);
    }

    fn conv(&mut self, name: &str, i: usize, o: usize, k: usize, zero: bool) {
        self.push(&format!("{name}.w"), vec![o, i, k, k], if zero { Init::Zero } else { Init::Fan(i * k * k) });
        self.push(&format!("{name}.b"), vec![o], Init::Zero);
    }

    fn res(&mut self, name: &str, i: usize, o: usize) {
        self.conv(&format!("{name}.conv1"), i, o, 3, false);
        self.lin(&format!("{name}.cond"), self.temb, o, false);
        self.conv(&format!("{name}.conv2"), o, o, 3, false);
        if i != o {
            self.conv(&format!("{name}.skip"), i, o, 1, false);
        }
    }

    fn attn(&mut self, name: &str, c: usize, kv_in: usize) {
        self.lin(&format!("{name}.q"), c, c, false);
        self.lin(&format!("{name}.k"), kv_in, c, false);
        self.lin(&format!("{name}.v"), kv_in, c, false);
        self.lin(&format!("{name}.out"), c, c, false);
    }
}

/// How a parameter is initialized.
enum Init {
    /// Normal with standard deviation `1/sqrt(fan_in)`.
    Fan(usize),
    Zero,
}

impl<F: Scalar> DenoiserModel<F> {
    /// Builds a freshly initialized model. Each parameter draws from its own
    /// named substream, so adding a parameter never perturbs the others.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let [c1, c2] = config.widths;
        let lc = config.latent_channels;
        let mut sp = Specs { list: Vec::new(), temb: config.temb_dim };

        sp.push("embed.table", vec![VOCAB_SIZE, c1], Init::Fan(1));
        sp.lin("base.temb.l1", c1, config.temb_dim, false);
        sp.lin("base.temb.l2", config.temb_dim, config.temb_dim, false);
        sp.conv("base.in", lc, c1, 3, false);
        sp.res("base.enc1.res", c1, c1);
        sp.conv("base.down", c1, c1, 3, false);
        sp.res("base.enc2.res", c1, c2);
        for (lvl, c) in [("enc1", c1), ("enc2", c2)] {
            let p = format!("base.{lvl}.moe");
            sp.attn(&format!("{p}.t1"), c, c);
            sp.attn(&format!("{p}.t2"), c, c);
            sp.attn(&format!("{p}.xattn"), c, c1);
            for i in 0..config.experts {
                sp.lin(&format!("{p}.expert{i}.l1"), c, c * config.expert_mult, false);
                sp.lin(&format!("{p}.expert{i}.l2"), c * config.expert_mult, c, false);
            }
        }
        sp.res("base.mid.res", c2, c2);
        sp.attn("base.mid.attn", c2, c2);
        sp.res("base.dec2.res", 2 * c2, c2);
        sp.conv("base.up", c2, c1, 3, false);
        sp.res("base.dec1.res", 2 * c1, c1);
        sp.conv("base.out", c1, lc, 3, false);
        sp.lin("base.skip", config.temb_dim, 1, true);

        let gw = config.gate_width;
        for i in 0..config.gate_layers {
            let cin = if i == 0 { 1 } else { gw };
            sp.push(&format!("gate.c{i}.w"), vec![gw, cin, 3, 3, 3], Init::Fan(cin * 27));
            sp.push(&format!("gate.c{i}.b"), vec![gw], Init::Zero);
        }
        sp.lin("gate.out", gw, config.experts, false);

        if config.injection_sites.is_empty() {
            return Self::from_specs(config, sp.list, seed);
        }
        sp.lin("adapter.temb.l1", c1, config.temb_dim, false);
        sp.lin("adapter.temb.l2", config.temb_dim, config.temb_dim, false);
        sp.conv("adapter.in", 2 * lc + 1, c1, 3, false);
        sp.res("adapter.enc1.res", c1, c1);
        sp.conv("adapter.down", c1, c1, 3, false);
        sp.res("adapter.enc2.res", c1, c2);
        for (lvl, c) in [("enc1", c1), ("enc2", c2)] {
            sp.attn(&format!("adapter.{lvl}.temporal.t1"), c, c);
            sp.attn(&format!("adapter.{lvl}.temporal.t2"), c, c);
        }
        sp.res("adapter.mid.res", c2, c2);
        sp.attn("adapter.mid.xattn", c2, c1);
        for &site in &config.injection_sites {
            let c = config.site_width(site);
            sp.conv(&format!("adapter.tap.{}", site.name()), c, c, 1, true);
        }
        Self::from_specs(config, sp.list, seed)
    }

    fn from_specs(config: ModelConfig, specs: Vec<(String, Vec<usize>, Init)>, seed: u64) -> Result<Self> {
        let root = RandomStream::new(seed).substream("model-init");
        let mut params = BTreeMap::new();
        for (name, shape, init) in specs {
            let t = match init {
                Init::Zero => Tensor::zeros(&shape),
                Init::Fan(fan) => {
                    let mut s = root.substream(&name);
                    let std = 1.0 / (fan as f64).sqrt();
                    rng_normal::<F>(&shape, &mut s).map(|v| v * F::of(std))
                }
            };
            if params.insert(name.clone(), t).is_some() {
                return Err(Error::invalid(format!("duplicate parameter {name}")));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<F>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<F>> {
        self.params.get(name).ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.params.get_mut(name).ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    /// Replaces a parameter, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let slot = self.param_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::shape("set_param", format!("{name}: {:?} vs {:?}", slot.shape(), value.shape())));
        }
        *slot = value;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<G: Scalar>(&self) -> DenoiserModel<G> {
        DenoiserModel {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Writes `manifest.json` and one `<name>.uptn` per parameter into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, stage: u8) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = CheckpointManifest {
            config: self.config.clone(),
            stage,
            precision: F::PRECISION_CODE,
            params: self
                .params
                .iter()
                .map(|(n, t)| ParamEntry { name: n.clone(), shape: t.shape().to_vec(), file: format!("{n}.uptn") })
                .collect(),
        };
        for (entry, t) in manifest.params.iter().zip(self.params.values()) {
            t.save(dir.join(&entry.file))?;
        }
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json { path: path.clone(), source: e })?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Loads a checkpoint, checking every parameter against the architecture.
    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, u8)> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?;
        let mut model = Self::new(manifest.config.clone(), 0)?;
        if manifest.params.len() != model.params.len() {
            return Err(Error::Format(format!(
                "{}: {} parameters listed, architecture has {}",
                path.display(),
                manifest.params.len(),
                model.params.len()
            )));
        }
        for entry in &manifest.params {
            let t = Tensor::<F>::load(dir.join(&entry.file))?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Format(format!("{}: shape differs from manifest", entry.file)));
            }
            model.set_param(&entry.name, t)?;
        }
        Ok((model, manifest.stage))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

/// Contents of a checkpoint's `manifest.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub stage: u8,
    pub precision: u8,
    pub params: Vec<ParamEntry>,
}
