//! Space-time mask taxonomy, the mixed-mask sampler and latent-resolution resize.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kernels, RandomStream, Tensor};
use crate::video::MaskVolume;

/// The four mask families used in training and inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Object,
    Random,
    Marginal,
    Interpolation,
}

impl MaskKind {
    pub const ALL: [MaskKind; 4] = [MaskKind::Object, MaskKind::Random, MaskKind::Marginal, MaskKind::Interpolation];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskKind::Object => "object",
            MaskKind::Random => "random",
            MaskKind::Marginal => "marginal",
            MaskKind::Interpolation => "interpolation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Categorical distribution over [`MaskKind`] plus the prompt-dropout rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedMaskPolicy {
    probabilities: [f64; 4],
    null_prompt_prob: f64,
}

impl MixedMaskPolicy {
    pub fn new(probabilities: [f64; 4], null_prompt_prob: f64) -> Result<Self> {
        let total: f64 = probabilities.iter().sum();
        if probabilities.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("mask probabilities {probabilities:?} must be >= 0 and sum to 1")));
        }
        if !(0.0..=1.0).contains(&null_prompt_prob) {
            return Err(Error::invalid(format!("null prompt probability {null_prompt_prob} outside [0, 1]")));
        }
        Ok(Self { probabilities, null_prompt_prob })
    }

    /// Object / random / marginal masks only, keeping their relative weights.
    pub fn spatial_only() -> Self {
        Self::new([0.4 / 0.7, 0.1 / 0.7, 0.2 / 0.7, 0.0], 0.1).expect("valid")
    }

    pub fn temporal_only() -> Self {
        Self::new([0.0, 0.0, 0.0, 1.0], 0.1).expect("valid")
    }

    pub fn probabilities(&self) -> [f64; 4] {
        self.probabilities
    }

    pub fn null_prompt_prob(&self) -> f64 {
        self.null_prompt_prob
    }
}

impl Default for MixedMaskPolicy {
    fn default() -> Self {
        Self::new([0.4, 0.1, 0.2, 0.3], 0.1).expect("valid")
    }
}

/// Kind-specific defaults applied by [`sample_mixed`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskDefaults {
    pub object_dilation: usize,
    pub random_coverage: (f64, f64),
    /// Marginal border as a fraction of the shorter spatial side.
    pub border_fraction: f64,
}

impl Default for MaskDefaults {
    fn default() -> Self {
        Self { object_dilation: 1, random_coverage: (0.1, 0.5), border_fraction: 0.25 }
    }
}

impl MaskDefaults {
    pub fn border(&self, height: usize, width: usize) -> usize {
        (self.border_fraction * height.min(width) as f64).floor() as usize
    }
}

/// What the mixed sampler needs to know about a clip.
#[derive(Clone, Copy, Debug)]
pub struct ClipContext<'a> {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Ground-truth footprint of the prompted object; required for [`MaskKind::Object`].
    pub object_mask: Option<&'a MaskVolume>,
}

#[derive(Clone, Debug)]
pub struct MixedDraw {
    pub mask: MaskVolume,
    pub kind: MaskKind,
    pub null_prompt: bool,
}

/// Per-frame dilation with a diamond (4-neighborhood) structuring element.
pub fn make_object_mask(seg: &MaskVolume, radius: i64) -> Result<MaskVolume> {
    if radius < 0 {
        return Err(Error::invalid(format!("dilation radius {radius} is negative")));
    }
    let r = radius;
    let (h, w) = (seg.height() as i64, seg.width() as i64);
    let mut out = seg.clone();
    for f in 0..seg.frames() {
        for y in 0..h {
            for x in 0..w {
                if !seg.get(f, y as usize, x as usize) {
                    continue;
                }
                for dy in -r..=r {
                    let span = r - dy.abs();
                    for dx in -span..=span {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy >= 0 && yy < h && xx >= 0 && xx < w {
                            out.set(f, yy as usize, xx as usize, true);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

const RANDOM_MASK_ATTEMPTS: usize = 200;

/// Union of 1–3 rectangles whose centers drift linearly across frames,
/// redrawn until total coverage lies in `coverage`.
pub fn make_random_mask(
    frames: usize,
    height: usize,
    width: usize,
    coverage: (f64, f64),
    stream: &mut RandomStream,
) -> Result<MaskVolume> {
    let (lo, hi) = coverage;
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(Error::invalid(format!("coverage range [{lo}, {hi}] is not within [0, 1]")));
    }
    if hi == 0.0 {
        return Ok(MaskVolume::zeros(frames, height, width));
    }
    if lo == 1.0 {
        return Ok(MaskVolume::ones(frames, height, width));
    }
    let (hf, wf) = (height as f64, width as f64);
    for _ in 0..RANDOM_MASK_ATTEMPTS {
        let target = stream.uniform_range(lo, hi);
        let count = 1 + stream.below(3) as usize;
        let area = target * hf * wf / count as f64;
        let rects: Vec<[f64; 6]> = (0..count)
            .map(|_| {
                let aspect = 2f64.powf(stream.uniform_range(-1.0, 1.0));
                let rh = (area * aspect).sqrt().clamp(1.0, hf);
                let rw = (area / rh).clamp(1.0, wf);
                let (cy, cx) = (stream.uniform_range(0.0, hf), stream.uniform_range(0.0, wf));
                let (dy, dx) = (stream.uniform_range(-0.25, 0.25) * hf, stream.uniform_range(-0.25, 0.25) * wf);
                [rh, rw, cy, cx, dy, dx]
            })
            .collect();
        let denom = frames.saturating_sub(1).max(1) as f64;
        let mask = MaskVolume::from_fn(frames, height, width, |f, y, x| {
            let s = f as f64 / denom;
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            rects.iter().any(|&[rh, rw, cy, cx, dy, dx]| {
                let (cy, cx) = (cy + dy * s, cx + dx * s);
                (py - cy).abs() <= rh / 2.0 && (px - cx).abs() <= rw / 2.0
            })
        });
        let c = mask.coverage();
        if c >= lo && c <= hi {
            return Ok(mask);
        }
    }
    Err(Error::invalid(format!(
        "no random mask with coverage in [{lo}, {hi}] after {RANDOM_MASK_ATTEMPTS} attempts"
    )))
}

/// Frame border of width `border`, identical in every frame.
pub fn make_marginal_mask(frames: usize, height: usize, width: usize, border: usize) -> Result<MaskVolume> {
    if 2 * border >= height.min(width) {
        return Err(Error::invalid(format!("border {border} leaves no interior in a {height}x{width} frame")));
    }
    Ok(MaskVolume::from_fn(frames, height, width, |_, y, x| {
        y < border || x < border || y >= height - border || x >= width - border
    }))
}

/// Keyframes kept, every other frame fully masked.
pub fn make_interpolation_mask(frames: usize, height: usize, width: usize, keyframes: &[usize]) -> Result<MaskVolume> {
    if keyframes.is_empty() {
        return Err(Error::invalid("interpolation needs at least one keyframe"));
    }
    if let Some(k) = keyframes.iter().find(|&&k| k >= frames) {
        return Err(Error::invalid(format!("keyframe {k} outside 0..{frames}")));
    }
    Ok(MaskVolume::from_fn(frames, height, width, |f, _, _| !keyframes.contains(&f)))
}

/// Draws a mask kind from `policy`, builds it, and independently decides prompt dropout.
pub fn sample_mixed(
    policy: &MixedMaskPolicy,
    ctx: &ClipContext<'_>,
    defaults: &MaskDefaults,
    stream: &mut RandomStream,
) -> Result<MixedDraw> {
    let kind = MaskKind::ALL[stream.categorical(&policy.probabilities)];
    let null_prompt = stream.bernoulli(policy.null_prompt_prob);
    let (f, h, w) = (ctx.frames, ctx.height, ctx.width);
    let mask = match kind {
        MaskKind::Object => {
            let seg = ctx
                .object_mask
                .ok_or_else(|| Error::invalid("object mask requested but the clip has no segmentation"))?;
            make_object_mask(seg, defaults.object_dilation as i64)?
        }
        MaskKind::Random => make_random_mask(f, h, w, defaults.random_coverage, stream)?,
        MaskKind::Marginal => make_marginal_mask(f, h, w, defaults.border(h, w))?,
        MaskKind::Interpolation => make_interpolation_mask(f, h, w, &[0, f - 1])?,
    };
    Ok(MixedDraw { mask, kind, null_prompt })
}

/// Per-frame Catmull-Rom resize to `height × width`, clamped to `[0, 1]`.
/// Returns a real-valued `[F, 1, height, width]` tensor.
pub fn resize_mask(m: &MaskVolume, height: usize, width: usize) -> Result<Tensor<f32>> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("resize target must be at least 1x1"));
    }
    let (ih, iw) = (m.height(), m.width());
    let ry = kernels::cubic_resize_matrix(ih, height);
    let rx = kernels::cubic_resize_matrix(iw, width);
    let mut out = Vec::with_capacity(m.frames() * height * width);
    let mut tmp = vec![0.0f64; height * iw];
    for f in 0..m.frames() {
        let src: Vec<f64> = m.frame(f).iter().map(|&v| v as f64).collect();
        kernels::matmul(&ry, false, &src, false, &mut tmp, height, ih, iw, false);
        let mut plane = vec![0.0f64; height * width];
        kernels::matmul(&tmp, false, &rx, true, &mut plane, height, iw, width, false);
        out.extend(plane.into_iter().map(|v| v.clamp(0.0, 1.0) as f32));
    }
    Tensor::new(vec![m.frames(), 1, height, width], out)
}
