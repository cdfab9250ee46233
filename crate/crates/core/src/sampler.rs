//! DDIM sampling with classifier-free guidance and adapter injection, plus
//! the inpainting, outpainting and interpolation wrappers.

use serde::{Deserialize, Serialize};

use crate::diffusion::{predict_x0, q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::maskgen::{make_interpolation_mask, make_marginal_mask};
use crate::model::{decode_latent, DenoiserModel, LatentBundle};
use crate::numerics::{rng_normal, RandomStream, Scalar, Tensor};
use crate::synthdata::{NULL_TOKEN, VOCAB_SIZE};
use crate::video::{MaskVolume, VideoVolume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub omega_s: f64,
    pub eta: f64,
    /// Replace the unmasked region of the output by the source in pixel space.
    pub final_composite: bool,
    /// Experimental: after every step, overwrite the known latent region with
    /// the re-noised masked-source latent. Off by default.
    pub latent_blend: bool,
}

impl SamplerConfig {
    pub const PAPER_STEPS: usize = 100;
    pub const DESK_STEPS: usize = 20;
    pub const DEFAULT_CFG: f64 = 12.5;

    /// Desk-scale defaults (20 steps).
    pub fn desk() -> Self {
        Self {
            steps: Self::DESK_STEPS,
            cfg_scale: Self::DEFAULT_CFG,
            omega_s: 1.0,
            eta: 0.0,
            final_composite: true,
            latent_blend: false,
        }
    }

    /// Full-scale defaults (100 steps).
    pub fn paper() -> Self {
        Self { steps: Self::PAPER_STEPS, ..Self::desk() }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > schedule.steps() {
            return Err(Error::invalid(format!("steps must be in 1..={}, got {}", schedule.steps(), self.steps)));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::invalid(format!("cfg_scale must be finite and >= 0, got {}", self.cfg_scale)));
        }
        if !(self.omega_s >= 0.0 && self.omega_s.is_finite()) {
            return Err(Error::invalid(format!("omega_s must be finite and >= 0, got {}", self.omega_s)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid(format!("eta must be in [0, 1], got {}", self.eta)));
        }
        Ok(())
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Strictly decreasing ladder `[T, …, 1, 0]` of `steps + 1` entries, evenly
/// strided over `[1, T]`.
pub fn timestep_ladder(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::invalid(format!("steps must be in 1..={total}, got {steps}")));
    }
    let mut ladder: Vec<usize> = if steps == 1 {
        vec![total]
    } else {
        (0..steps)
            .rev()
            .map(|k| (1.0 + k as f64 * (total - 1) as f64 / (steps - 1) as f64).round() as usize)
            .collect()
    };
    ladder.push(0);
    Ok(ladder)
}

/// One DDIM update from `t` to `t_prev` (`ᾱ_0 = 1`). Noise is drawn only when
/// `eta > 0`.
pub fn ddim_step<F: Scalar>(
    z_t: &Tensor<F>,
    eps_hat: &Tensor<F>,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    eta: f64,
    stream: &mut RandomStream,
) -> Result<Tensor<F>> {
    if t_prev >= t || t > schedule.steps() {
        return Err(Error::invalid(format!("DDIM step needs T >= t > t_prev >= 0, got t={t}, t_prev={t_prev}")));
    }
    let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).max(0.0).sqrt();
    let x0 = predict_x0(z_t, eps_hat, t, schedule)?;
    let (a, b) = (F::of(ab_prev.sqrt()), F::of((1.0 - ab_prev - sigma * sigma).max(0.0).sqrt()));
    let mean = x0.zip_map(eps_hat, "ddim_step", |x, e| a * x + b * e)?;
    if sigma == 0.0 {
        return Ok(mean);
    }
    let xi = rng_normal::<F>(z_t.shape(), stream);
    let s = F::of(sigma);
    mean.zip_map(&xi, "ddim_step", |m, n| m + s * n)
}

/// `eps_null + s·(eps_cond − eps_null)`. Only one model call is made when the
/// result reduces to a single branch (s = 0, s = 1 or a null prompt).
pub fn guided_eps<F: Scalar>(
    model: &DenoiserModel<F>,
    bundle: &LatentBundle<F>,
    t: usize,
    prompt: usize,
    cfg_scale: f64,
    omega_s: f64,
) -> Result<Tensor<F>> {
    if !(cfg_scale >= 0.0 && cfg_scale.is_finite()) {
        return Err(Error::invalid(format!("cfg_scale must be finite and >= 0, got {cfg_scale}")));
    }
    if prompt == NULL_TOKEN || cfg_scale == 0.0 {
        return model.denoise(bundle, t, NULL_TOKEN, omega_s);
    }
    let cond = model.denoise(bundle, t, prompt, omega_s)?;
    if cfg_scale == 1.0 {
        return Ok(cond);
    }
    let null = model.denoise(bundle, t, NULL_TOKEN, omega_s)?;
    let s = F::of(cfg_scale);
    null.zip_map(&cond, "guided_eps", |n, c| n + s * (c - n))
}

/// Fills the masked region of `source` (mask 1 = synthesize).
pub fn sample_inpaint(
    model: &DenoiserModel<f32>,
    schedule: &NoiseSchedule,
    source: &VideoVolume,
    mask: &MaskVolume,
    prompt: usize,
    cfg: &SamplerConfig,
    stream: &RandomStream,
) -> Result<VideoVolume> {
    cfg.validate(schedule)?;
    mask.check_matches(source)?;
    if prompt >= VOCAB_SIZE {
        return Err(Error::invalid(format!("prompt token {prompt} outside vocabulary 0..{VOCAB_SIZE}")));
    }
    let (z0_m, m_res) = LatentBundle::<f32>::conditioning(source, mask)?;
    let mut z = rng_normal::<f32>(z0_m.shape(), &mut stream.substream("init"));
    let ladder = timestep_ladder(schedule.steps(), cfg.steps)?;
    for (k, pair) in ladder.windows(2).enumerate() {
        let (t, t_prev) = (pair[0], pair[1]);
        let bundle = LatentBundle::new(z, z0_m.clone(), m_res.clone())?;
        let eps = guided_eps(model, &bundle, t, prompt, cfg.cfg_scale, cfg.omega_s)?;
        if let Some(i) = eps.first_non_finite() {
            return Err(Error::NonFinite { context: format!("predicted noise at t={t}"), index: i });
        }
        let mut step_stream = stream.substream_indexed("step", k as u64);
        z = ddim_step(&bundle.z_t, &eps, t, t_prev, schedule, cfg.eta, &mut step_stream)?;
        if cfg.latent_blend {
            z = blend_known(&z, &z0_m, &m_res, t_prev, schedule, &mut step_stream)?;
        }
    }
    let mut out = decode_latent(&z)?;
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    if cfg.final_composite {
        composite(&mut out, source, mask);
    }
    Ok(out)
}

/// `m·z + (1 − m)·noised(z0_m)` per latent pixel, broadcast over channels.
fn blend_known(
    z: &Tensor<f32>,
    z0_m: &Tensor<f32>,
    m: &Tensor<f32>,
    t: usize,
    schedule: &NoiseSchedule,
    stream: &mut RandomStream,
) -> Result<Tensor<f32>> {
    let known = if t == 0 {
        z0_m.clone()
    } else {
        q_sample(z0_m, t, &rng_normal::<f32>(z0_m.shape(), stream), schedule)?
    };
    let [f, c, h, w] = [z.shape()[0], z.shape()[1], z.shape()[2], z.shape()[3]];
    let mut out = z.clone();
    for fi in 0..f {
        for ci in 0..c {
            for p in 0..h * w {
                let i = (fi * c + ci) * h * w + p;
                let mv = m.data()[fi * h * w + p];
                out.data_mut()[i] = mv * z.data()[i] + (1.0 - mv) * known.data()[i];
            }
        }
    }
    Ok(out)
}

/// Copies `source` into `out` wherever the mask is 0.
fn composite(out: &mut VideoVolume, source: &VideoVolume, mask: &MaskVolume) {
    let [f, c, h, w] = out.dims();
    for fi in 0..f {
        let m = mask.frame(fi).to_vec();
        for ci in 0..c {
            let off = (fi * c + ci) * h * w;
            for (p, &mv) in m.iter().enumerate() {
                if mv == 0.0 {
                    out.data_mut()[off + p] = source.data()[off + p];
                }
            }
        }
    }
}

/// Synthesizes a border of `border` pixels around each frame of the
/// caller's pre-padded canvas.
pub fn sample_outpaint(
    model: &DenoiserModel<f32>,
    schedule: &NoiseSchedule,
    source: &VideoVolume,
    border: usize,
    prompt: usize,
    cfg: &SamplerConfig,
    stream: &RandomStream,
) -> Result<VideoVolume> {
    let mask = make_marginal_mask(source.frames(), source.height(), source.width(), border)?;
    sample_inpaint(model, schedule, source, &mask, prompt, cfg, stream)
}

/// Regenerates every frame strictly between keyframes (and any outside them).
pub fn sample_interpolate(
    model: &DenoiserModel<f32>,
    schedule: &NoiseSchedule,
    video: &VideoVolume,
    keyframes: &[usize],
    prompt: usize,
    cfg: &SamplerConfig,
    stream: &RandomStream,
) -> Result<VideoVolume> {
    let mask = make_interpolation_mask(video.frames(), video.height(), video.width(), keyframes)?;
    sample_inpaint(model, schedule, video, &mask, prompt, cfg, stream)
}
