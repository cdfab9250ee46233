//! Subcommand definitions and their implementations.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use unipaint::diffusion::NoiseSchedule;
use unipaint::maskgen::{
    make_interpolation_mask, make_marginal_mask, make_object_mask, make_random_mask, MaskDefaults, MixedMaskPolicy,
};
use unipaint::metrics::evaluate;
use unipaint::model::{DenoiserModel, ModelConfig};
use unipaint::numerics::RandomStream;
use unipaint::sampler::{sample_inpaint, sample_interpolate, sample_outpaint, SamplerConfig};
use unipaint::synthdata::{gen_dataset, load_dataset, save_dataset, ClipConfig, ScenePrompt, NULL_TOKEN};
use unipaint::trainer::{train, StepRecord, TrainConfig};
use unipaint::video::{MaskVolume, VideoVolume};

use crate::manifest::{beside, inside, RunManifest};

const AFTER_HELP: &str = "\
Defaults: desk scale uses 20 DDIM steps on 8-frame 32x32 clips; paper scale uses
100 DDIM steps (--paper-scale). Classifier-free guidance defaults to 12.5 at both
scales. Set UNIPAINT_THREADS to cap worker threads.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.";

#[derive(Parser, Debug)]
#[command(name = "unipaint", version, about = "Unified space-time video inpainting at desk scale", after_help = AFTER_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic moving-shapes dataset.
    GenData(GenDataArgs),
    /// Train (stage 1) or fine-tune temporal/MoE parameters (stage 2).
    Train(TrainArgs),
    /// Run inpainting, outpainting or interpolation.
    Infer(InferArgs),
    /// Build a mask volume of one of the four kinds.
    MakeMask(MakeMaskArgs),
    /// Compare a candidate video against a reference.
    Eval(EvalArgs),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub clips: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Frame height and width.
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [32, 32])]
    pub size: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyArg {
    /// Object/random/marginal/interpolation at 0.4/0.1/0.2/0.3.
    Mixed,
    /// Spatial kinds only (object/random/marginal, renormalized).
    Spatial,
    /// Interpolation masks only.
    Temporal,
}

impl PolicyArg {
    fn policy(self) -> MixedMaskPolicy {
        match self {
            PolicyArg::Mixed => MixedMaskPolicy::default(),
            PolicyArg::Spatial => MixedMaskPolicy::spatial_only(),
            PolicyArg::Temporal => MixedMaskPolicy::temporal_only(),
        }
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Checkpoint to start from (required for stage 2).
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    /// Learning rate [default: 1e-4 for stage 1, 1e-5 for stage 2].
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Channel widths of the two resolution levels (new models only).
    #[arg(long, num_args = 2, value_names = ["W1", "W2"], default_values_t = [32, 64])]
    pub widths: Vec<usize>,
    /// Number of experts per MoE block (new models only).
    #[arg(long, default_value_t = 4)]
    pub experts: usize,
    #[arg(long, value_enum, default_value_t = PolicyArg::Mixed)]
    pub policy: PolicyArg,
    /// Preservation scale used during training.
    #[arg(long, default_value_t = 1.0)]
    pub omega_s_train: f64,
    /// Also write a checkpoint every N steps under <out>/checkpoints.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct InferArgs {
    #[command(subcommand)]
    pub task: InferTask,
}

#[derive(Subcommand, Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferTask {
    /// Fill the region where the mask is 1.
    Inpaint {
        #[command(flatten)]
        common: InferCommon,
        #[arg(long)]
        mask: PathBuf,
    },
    /// Synthesize a border of the given width around every frame.
    Outpaint {
        #[command(flatten)]
        common: InferCommon,
        #[arg(long)]
        border: usize,
    },
    /// Regenerate the frames between keyframes.
    Interpolate {
        #[command(flatten)]
        common: InferCommon,
        /// Comma-separated keyframe indices, e.g. 0,7.
        #[arg(long, value_delimiter = ',', required = true)]
        keyframes: Vec<usize>,
    },
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct InferCommon {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub video: PathBuf,
    /// Prompt token such as red-square-linear, or "null".
    #[arg(long, default_value = "null")]
    pub prompt: String,
    /// DDIM steps [desk default: 20; with --paper-scale: 100].
    #[arg(long)]
    pub steps: Option<usize>,
    /// Use paper-scale defaults (100 DDIM steps).
    #[arg(long)]
    pub paper_scale: bool,
    /// Classifier-free guidance scale.
    #[arg(long, default_value_t = SamplerConfig::DEFAULT_CFG)]
    pub cfg: f64,
    /// Preservation scale applied to adapter features.
    #[arg(long, default_value_t = 1.0)]
    pub omega_s: f64,
    /// DDIM stochasticity (0 = deterministic).
    #[arg(long, default_value_t = 0.0)]
    pub eta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output video tensor.
    #[arg(long)]
    pub out: PathBuf,
    /// Skip the final pixel-space compositing of the unmasked region.
    #[arg(long)]
    pub no_composite: bool,
    /// Re-impose the known latent region after every step (experimental).
    #[arg(long)]
    pub latent_blend: bool,
    /// Drop the adapter branch and run the base model alone.
    #[arg(long)]
    pub base_only: bool,
    /// Also write binary PPM frames into this directory.
    #[arg(long)]
    pub frames_out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKindArg {
    Object,
    Random,
    Marginal,
    Interpolation,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct MakeMaskArgs {
    #[arg(long, value_enum)]
    pub kind: MaskKindArg,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [32, 32])]
    pub size: Vec<usize>,
    /// Object segmentation mask (UPTN) for --kind object; sets the extents.
    #[arg(long)]
    pub seg: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub dilation: usize,
    /// Coverage range for random masks.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], default_values_t = [0.1, 0.5])]
    pub coverage: Vec<f64>,
    /// Border width for marginal masks [default: a quarter of the shorter side].
    #[arg(long)]
    pub border: Option<usize>,
    /// Keyframes for interpolation masks [default: first and last frame].
    #[arg(long, value_delimiter = ',')]
    pub keyframes: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub cand: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// Prompt token for the alignment proxy.
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<unipaint::Error> for CliError {
    fn from(e: unipaint::Error) -> Self {
        use unipaint::Error as E;
        match e {
            E::Numeric(_) | E::NonFinite { .. } => CliError::Numeric(e.to_string()),
            E::InvalidArgument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(command: Command) -> Result<()> {
    match &command {
        Command::GenData(a) => gen_data(a, &command),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => infer(a, &command),
        Command::MakeMask(a) => make_mask(a, &command),
        Command::Eval(a) => eval(a, &command),
        Command::Replay(a) => {
            let m = RunManifest::read(&a.manifest)?;
            if matches!(m.command, Command::Replay(_)) {
                return Err(CliError::Data("a manifest cannot record a replay".into()));
            }
            if m.tool_version != crate::manifest::TOOL_VERSION {
                eprintln!("warning: manifest written by version {}, replaying with {}", m.tool_version, crate::manifest::TOOL_VERSION);
            }
            run(m.command)
        }
    }
}

fn hw(size: &[usize]) -> (usize, usize) {
    (size[0], size[1])
}

/// Parses a prompt token name; `null` is the unconditional token.
pub fn parse_prompt(name: &str) -> Result<usize> {
    if name == "null" {
        return Ok(NULL_TOKEN);
    }
    ScenePrompt::parse(name).map(|p| p.token_id()).ok_or_else(|| {
        let vocab: Vec<String> = ScenePrompt::vocabulary().iter().map(|p| p.to_string()).collect();
        CliError::Usage(format!("unknown prompt {name:?}; vocabulary: null, {}", vocab.join(", ")))
    })
}

fn gen_data(a: &GenDataArgs, command: &Command) -> Result<()> {
    let (h, w) = hw(&a.size);
    let clips = gen_dataset(a.clips, &ClipConfig::new(a.frames, h, w), a.seed)?;
    save_dataset(&a.out, &clips)?;
    let mut m = RunManifest::new(command.clone(), a.seed);
    m.outputs.push(a.out.clone());
    m.write(&inside(&a.out))?;
    println!("wrote {} clips to {}", clips.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    if a.stage == 2 && a.init.is_none() {
        return Err(CliError::Usage("stage 2 needs a stage-1 checkpoint via --init".into()));
    }
    if a.steps == 0 {
        return Err(CliError::Usage("--steps must be at least 1".into()));
    }
    let lr = a.lr.unwrap_or(if a.stage == 2 { TrainConfig::STAGE2_LR } else { TrainConfig::STAGE1_LR });
    let clips = load_dataset(&a.data)?;
    let mut model = match &a.init {
        Some(dir) => DenoiserModel::<f32>::load(dir)?.0,
        None => {
            let cfg = ModelConfig {
                widths: [a.widths[0], a.widths[1]],
                temb_dim: 2 * a.widths[0],
                experts: a.experts,
                ..Default::default()
            };
            DenoiserModel::new(cfg, a.seed)?
        }
    };
    let cfg = TrainConfig {
        learning_rate: lr,
        batch: a.batch,
        policy: a.policy.policy(),
        mask_defaults: MaskDefaults::default(),
        omega_s_train: a.omega_s_train,
        ..TrainConfig::for_stage(a.stage, a.steps, a.seed)
    };
    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let log_path = a.out.join("train_log.csv");
    let mut log = fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    writeln!(log, "{}", StepRecord::CSV_HEADER).map_err(|e| CliError::io(&log_path, e))?;
    let mut checkpoints = Vec::new();
    let records = train(&mut model, &clips, &cfg, &NoiseSchedule::desk_default(), |rec, model| {
        writeln!(log, "{}", rec.csv_line()).map_err(|e| unipaint::Error::Io { path: log_path.clone(), source: e })?;
        if let Some(every) = a.checkpoint_every.filter(|&n| n > 0) {
            if rec.step % every == 0 {
                let dir = a.out.join("checkpoints").join(format!("step_{:06}", rec.step));
                model.save(&dir, a.stage)?;
                checkpoints.push(dir);
            }
        }
        Ok(())
    })?;
    model.save(&a.out, a.stage)?;

    let mut resolved = a.clone();
    resolved.lr = Some(lr);
    let mut m = RunManifest::new(Command::Train(resolved), a.seed);
    if let Some(init) = &a.init {
        m.checkpoints.push(init.clone());
    }
    m.checkpoints.extend(checkpoints);
    m.checkpoints.push(a.out.clone());
    m.outputs.push(log_path.clone());
    m.notes = serde_json::json!({
        "stage": a.stage,
        "learning_rate": lr,
        "train_config": cfg,
        "model_config": model.config(),
        "parameters": model.num_params(),
        "final_loss": records.last().map(|r| r.loss),
    });
    m.write(&inside(&a.out))?;
    println!(
        "stage {} trained {} steps (lr {lr:e}); final loss {:.6}; checkpoint {}",
        a.stage,
        records.len(),
        records.last().map_or(f64::NAN, |r| r.loss),
        a.out.display()
    );
    Ok(())
}

fn infer(a: &InferArgs, command: &Command) -> Result<()> {
    let common = match &a.task {
        InferTask::Inpaint { common, .. } | InferTask::Outpaint { common, .. } | InferTask::Interpolate { common, .. } => {
            common
        }
    };
    let prompt = parse_prompt(&common.prompt)?;
    let steps = common.steps.unwrap_or(if common.paper_scale { SamplerConfig::PAPER_STEPS } else { SamplerConfig::DESK_STEPS });
    let cfg = SamplerConfig {
        steps,
        cfg_scale: common.cfg,
        omega_s: common.omega_s,
        eta: common.eta,
        final_composite: !common.no_composite,
        latent_blend: common.latent_blend,
    };
    let (model, _) = DenoiserModel::<f32>::load(&common.ckpt)?;
    let model = if common.base_only { model.base_only() } else { model };
    let video = VideoVolume::load(&common.video)?;
    let schedule = NoiseSchedule::desk_default();
    let stream = RandomStream::new(common.seed).substream("infer");
    let (out, mask) = match &a.task {
        InferTask::Inpaint { mask, .. } => {
            let mask = MaskVolume::load(mask)?;
            (sample_inpaint(&model, &schedule, &video, &mask, prompt, &cfg, &stream)?, mask)
        }
        InferTask::Outpaint { border, .. } => {
            let mask = make_marginal_mask(video.frames(), video.height(), video.width(), *border)?;
            (sample_outpaint(&model, &schedule, &video, *border, prompt, &cfg, &stream)?, mask)
        }
        InferTask::Interpolate { keyframes, .. } => {
            let mask = make_interpolation_mask(video.frames(), video.height(), video.width(), keyframes)?;
            (sample_interpolate(&model, &schedule, &video, keyframes, prompt, &cfg, &stream)?, mask)
        }
    };
    out.save(&common.out)?;
    let mut m = RunManifest::new(command.clone(), common.seed);
    m.checkpoints.push(common.ckpt.clone());
    m.outputs.push(common.out.clone());
    if let Some(dir) = &common.frames_out {
        out.write_ppm_frames(dir)?;
        m.outputs.push(dir.clone());
    }
    let synthesized = (0..mask.frames()).filter(|&f| mask.frame(f).iter().any(|&v| v != 0.0)).count();
    m.notes = serde_json::json!({ "sampler": cfg, "synthesized_frames": synthesized, "prompt_token": prompt });
    m.write(&beside(&common.out))?;
    println!("wrote {} ({synthesized} frames with synthesized pixels)", common.out.display());
    Ok(())
}

fn make_mask(a: &MakeMaskArgs, command: &Command) -> Result<()> {
    let (h, w) = hw(&a.size);
    let f = a.frames;
    let mask = match a.kind {
        MaskKindArg::Object => {
            let seg = a.seg.as_ref().ok_or_else(|| CliError::Usage("--kind object needs --seg".into()))?;
            make_object_mask(&MaskVolume::load(seg)?, a.dilation as i64)?
        }
        MaskKindArg::Random => {
            let mut s = RandomStream::new(a.seed).substream("make-mask");
            make_random_mask(f, h, w, (a.coverage[0], a.coverage[1]), &mut s)?
        }
        MaskKindArg::Marginal => {
            let border = a.border.unwrap_or_else(|| MaskDefaults::default().border(h, w));
            make_marginal_mask(f, h, w, border)?
        }
        MaskKindArg::Interpolation => {
            let keys = if a.keyframes.is_empty() { vec![0, f.saturating_sub(1)] } else { a.keyframes.clone() };
            make_interpolation_mask(f, h, w, &keys)?
        }
    };
    mask.save(&a.out)?;
    let mut m = RunManifest::new(command.clone(), a.seed);
    m.outputs.push(a.out.clone());
    m.notes = serde_json::json!({ "coverage": mask.coverage() });
    m.write(&beside(&a.out))?;
    println!("wrote {} (coverage {:.4})", a.out.display(), mask.coverage());
    Ok(())
}

fn eval(a: &EvalArgs, command: &Command) -> Result<()> {
    let reference = VideoVolume::load(&a.reference)?;
    let cand = VideoVolume::load(&a.cand)?;
    let mask = MaskVolume::load(&a.mask)?;
    let [f, _, h, w] = reference.dims();
    if cand.dims() != reference.dims() || [mask.frames(), mask.height(), mask.width()] != [f, h, w] {
        return Err(CliError::Data(format!(
            "shape mismatch:\n  ref  {}: {:?}\n  cand {}: {:?}\n  mask {}: {:?}",
            a.reference.display(),
            reference.dims(),
            a.cand.display(),
            cand.dims(),
            a.mask.display(),
            mask.tensor().shape()
        )));
    }
    let prompt = match &a.prompt {
        Some(p) => match parse_prompt(p)? {
            NULL_TOKEN => None,
            id => ScenePrompt::from_token(id),
        },
        None => None,
    };
    let report = evaluate(&reference, &cand, &mask, prompt.as_ref())?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(&a.out, text.clone() + "\n").map_err(|e| CliError::io(&a.out, e))?;
    let mut m = RunManifest::new(command.clone(), 0);
    m.outputs.push(a.out.clone());
    m.write(&beside(&a.out))?;
    println!("{text}");
    Ok(())
}
