//! Mixed-mask ε-prediction training with prompt dropout, Adam updates and
//! the two-stage schedule (everything, then temporal/MoE/gate/adapter taps).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::maskgen::{sample_mixed, ClipContext, MaskDefaults, MaskKind, MixedMaskPolicy};
use crate::model::{encode_latent, Binding, DenoiserModel, ForwardOptions, LatentBundle};
use crate::numerics::{rng_normal, Graph, RandomStream, Tensor};
use crate::synthdata::{SyntheticClip, NULL_TOKEN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: u8,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch: usize,
    pub policy: MixedMaskPolicy,
    pub mask_defaults: MaskDefaults,
    pub omega_s_train: f64,
    pub seed: u64,
    /// Global gradient-norm clip threshold.
    pub grad_clip: f64,
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub const STAGE1_LR: f64 = 1e-4;
    pub const STAGE2_LR: f64 = 1e-5;

    /// Defaults for `stage` (1 or 2).
    pub fn for_stage(stage: u8, steps: usize, seed: u64) -> Self {
        Self {
            stage,
            learning_rate: if stage == 2 { Self::STAGE2_LR } else { Self::STAGE1_LR },
            steps,
            batch: 4,
            policy: MixedMaskPolicy::default(),
            mask_defaults: MaskDefaults::default(),
            omega_s_train: 1.0,
            seed,
            grad_clip: 1.0,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::invalid(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch must be >= 1"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::invalid("grad_clip must be > 0"));
        }
        Ok(())
    }

    fn binding(&self) -> Binding {
        if self.stage == 2 {
            Binding::stage2()
        } else {
            Binding::all_trainable()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments per parameter name.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    /// One update of every parameter in `grads` with learning rate `lr`.
    pub fn update(&mut self, model: &mut DenoiserModel<f32>, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = model.param_mut(name)?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for ((w, &gi), (mi, vi)) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let delta = lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                *w = (*w as f64 - delta) as f32;
            }
        }
        Ok(())
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub stage: u8,
    /// Mean ε-MSE over the batch.
    pub loss: f64,
    /// Mask kind per clip, in batch order.
    pub kinds: Vec<MaskKind>,
    pub null_prompts: usize,
    pub timesteps: Vec<usize>,
    /// Mean |g| over trainable entries, before clipping.
    pub mean_abs_grad: f64,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,stage,loss,mask_kind,mean_abs_grad";

    pub fn csv_line(&self) -> String {
        let kinds: Vec<&str> = self.kinds.iter().map(|k| k.name()).collect();
        format!("{},{},{:.9e},{},{:.9e}", self.step, self.stage, self.loss, kinds.join(";"), self.mean_abs_grad)
    }
}

/// Everything drawn for one clip of one step.
pub struct ClipDraw {
    pub kind: MaskKind,
    pub prompt: usize,
    pub t: usize,
    pub bundle: LatentBundle<f32>,
    pub eps: Tensor<f32>,
}

/// Draws mask, prompt dropout, timestep and noise for `clip` from `stream`.
pub fn draw_clip(
    clip: &SyntheticClip,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    stream: &mut RandomStream,
) -> Result<ClipDraw> {
    let v = &clip.video;
    let ctx = ClipContext { frames: v.frames(), height: v.height(), width: v.width(), object_mask: Some(&clip.object_mask) };
    let draw = sample_mixed(&cfg.policy, &ctx, &cfg.mask_defaults, stream)?;
    let prompt = if draw.null_prompt { NULL_TOKEN } else { clip.prompt.token_id() };
    let t = 1 + stream.below(schedule.steps() as u64) as usize;
    let z0 = encode_latent(v)?;
    let eps = rng_normal::<f32>(z0.shape(), stream);
    let z_t = q_sample(&z0, t, &eps, schedule)?;
    let (z0_m, m) = LatentBundle::conditioning(v, &draw.mask)?;
    Ok(ClipDraw { kind: draw.kind, prompt, t, bundle: LatentBundle::new(z_t, z0_m, m)?, eps })
}

struct ClipGrad {
    loss: f64,
    grads: Vec<(String, Tensor<f32>)>,
}

fn clip_gradients(model: &DenoiserModel<f32>, d: &ClipDraw, cfg: &TrainConfig) -> Result<ClipGrad> {
    let mut g = Graph::new();
    let mut bind = cfg.binding();
    let fv = model.forward(&mut g, &mut bind, &d.bundle, d.t, d.prompt, cfg.omega_s_train, &ForwardOptions::default())?;
    let target = g.constant(d.eps.clone());
    let diff = g.sub(fv.eps, target)?;
    let sq = g.mul(diff, diff)?;
    let loss = g.mean(sq);
    let lv = g.value(loss).item() as f64;
    if !lv.is_finite() {
        return Ok(ClipGrad { loss: lv, grads: Vec::new() });
    }
    let mut grads = g.backward(loss)?;
    let mut out: Vec<(String, Tensor<f32>)> = bind
        .vars()
        .iter()
        .filter(|(name, _)| bind.is_trainable(name))
        .map(|(name, &v)| (name.clone(), grads.take(v)))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(ClipGrad { loss: lv, grads: out })
}

/// Worker pool sized by `UNIPAINT_THREADS` (rayon's default when unset).
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("UNIPAINT_THREADS") {
        let n: usize = v.parse().map_err(|_| Error::invalid(format!("UNIPAINT_THREADS must be a count, got {v:?}")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

/// One optimizer step on `batch`. Per-clip gradients are computed in
/// parallel and reduced in batch order, so results do not depend on the
/// thread count.
pub fn train_step(
    model: &mut DenoiserModel<f32>,
    adam: &mut Adam,
    batch: &[&SyntheticClip],
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    step: usize,
    stream: &RandomStream,
) -> Result<StepRecord> {
    let draws: Vec<ClipDraw> = batch
        .iter()
        .enumerate()
        .map(|(i, clip)| draw_clip(clip, cfg, schedule, &mut stream.substream_indexed("clip", i as u64)))
        .collect::<Result<_>>()?;
    let kinds: Vec<MaskKind> = draws.iter().map(|d| d.kind).collect();
    let timesteps: Vec<usize> = draws.iter().map(|d| d.t).collect();
    let frozen: &DenoiserModel<f32> = model;
    let results: Vec<ClipGrad> = draws.par_iter().map(|d| clip_gradients(frozen, d, cfg)).collect::<Result<_>>()?;

    let loss = results.iter().map(|r| r.loss).sum::<f64>() / results.len() as f64;
    if !loss.is_finite() {
        let mut hist = String::new();
        for k in MaskKind::ALL {
            let _ = write!(hist, "{}={} ", k.name(), kinds.iter().filter(|&&x| x == k).count());
        }
        return Err(Error::Numeric(format!(
            "non-finite loss at step {step} (stage {}): t = {timesteps:?}; mask kinds: {}",
            cfg.stage,
            hist.trim_end()
        )));
    }

    let scale = 1.0 / results.len() as f64;
    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &results {
        for (name, g) in &r.grads {
            let acc = grads.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for (a, &v) in acc.iter_mut().zip(g.data()) {
                *a += v as f64 * scale;
            }
        }
    }
    let (mut abs_sum, mut sq_sum, mut count) = (0.0, 0.0, 0usize);
    for g in grads.values() {
        for &v in g {
            abs_sum += v.abs();
            sq_sum += v * v;
        }
        count += g.len();
    }
    let norm = sq_sum.sqrt();
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("non-finite gradient norm at step {step}: t = {timesteps:?}")));
    }
    if norm > cfg.grad_clip {
        let k = cfg.grad_clip / norm;
        grads.values_mut().flatten().for_each(|v| *v *= k);
    }
    adam.update(model, &grads, cfg.learning_rate)?;
    Ok(StepRecord {
        step,
        stage: cfg.stage,
        loss,
        null_prompts: draws.iter().filter(|d| d.prompt == NULL_TOKEN).count(),
        kinds,
        timesteps,
        mean_abs_grad: if count == 0 { 0.0 } else { abs_sum / count as f64 },
    })
}

/// Runs `cfg.steps` steps over `clips`, calling `observe` after each step.
/// Batches are drawn uniformly with replacement from a per-step substream.
pub fn train(
    model: &mut DenoiserModel<f32>,
    clips: &[SyntheticClip],
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    mut observe: impl FnMut(&StepRecord, &DenoiserModel<f32>) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::invalid("training needs at least one clip"));
    }
    let pool = worker_pool()?;
    let root = RandomStream::new(cfg.seed).substream(if cfg.stage == 2 { "train-stage2" } else { "train-stage1" });
    let mut adam = Adam::new(cfg.adam);
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let step_stream = root.substream_indexed("step", step as u64);
        let mut pick = step_stream.substream("batch");
        let batch: Vec<&SyntheticClip> =
            (0..cfg.batch).map(|_| &clips[pick.below(clips.len() as u64) as usize]).collect();
        let rec = pool.install(|| train_step(model, &mut adam, &batch, cfg, schedule, step, &step_stream))?;
        observe(&rec, model)?;
        records.push(rec);
    }
    Ok(records)
}

/// Loss records of both stages.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoStageLog {
    pub stage1: Vec<StepRecord>,
    pub stage2: Vec<StepRecord>,
}

/// Stage 1 trains everything; stage 2 continues from the stage-1 weights with
/// only temporal/MoE/gate/adapter-tap parameters trainable.
pub fn run_two_stage(
    model: &mut DenoiserModel<f32>,
    clips: &[SyntheticClip],
    stage1: &TrainConfig,
    stage2: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<TwoStageLog> {
    if stage1.stage != 1 || stage2.stage != 2 {
        return Err(Error::invalid(format!("expected stages 1 and 2, got {} and {}", stage1.stage, stage2.stage)));
    }
    let s1 = train(model, clips, stage1, schedule, |_, _| Ok(()))?;
    let s2 = train(model, clips, stage2, schedule, |_, _| Ok(()))?;
    Ok(TwoStageLog { stage1: s1, stage2: s2 })
}

/// Mean loss of the first and last `window` records.
pub fn loss_windows(records: &[StepRecord], window: usize) -> (f64, f64) {
    let w = window.min(records.len()).max(1);
    let mean = |r: &[StepRecord]| r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64;
    (mean(&records[..w]), mean(&records[records.len() - w..]))
}
