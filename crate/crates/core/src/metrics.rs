//! Background preservation, PSNR, SSIM, temporal-consistency and prompt-alignment
//! proxies, and the copy-nearest-keyframe interpolation baseline.
//!
//! Undefined values use sentinels: PSNR of identical inputs is `+inf`, empty
//! regions give `NaN`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::ScenePrompt;
use crate::video::{MaskVolume, VideoVolume};

fn same_dims(a: &VideoVolume, b: &VideoVolume, op: &'static str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean absolute difference over unmasked pixels (all channels). `NaN` when
/// the mask covers everything.
pub fn bp_l1(original: &VideoVolume, edited: &VideoVolume, mask: &MaskVolume) -> Result<f64> {
    same_dims(original, edited, "bp_l1")?;
    mask.check_matches(original)?;
    let [f, c, h, w] = original.dims();
    let mut total = 0.0;
    let mut n = 0usize;
    for fi in 0..f {
        let m = mask.frame(fi);
        for ci in 0..c {
            let off = (fi * c + ci) * h * w;
            for p in 0..h * w {
                if m[p] == 0.0 {
                    total += (original.data()[off + p] as f64 - edited.data()[off + p] as f64).abs();
                    n += 1;
                }
            }
        }
    }
    Ok(if n == 0 { f64::NAN } else { total / n as f64 })
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64
}

/// `10·log10(max_val² / MSE)`; `+inf` when the inputs are identical.
pub fn psnr(reference: &VideoVolume, candidate: &VideoVolume, max_val: f64) -> Result<f64> {
    same_dims(reference, candidate, "psnr")?;
    Ok(psnr_from_mse(mse(reference.data(), candidate.data()), max_val))
}

/// PSNR restricted to the listed frames.
pub fn psnr_frames(reference: &VideoVolume, candidate: &VideoVolume, frames: &[usize], max_val: f64) -> Result<f64> {
    same_dims(reference, candidate, "psnr")?;
    if frames.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for &f in frames {
        total += mse(reference.frame(f), candidate.frame(f));
    }
    Ok(psnr_from_mse(total / frames.len() as f64, max_val))
}

fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 7, k1: 0.01, k2: 0.03, dynamic_range: 2.0 }
    }
}

/// Summed-area table with a zero first row and column.
fn integral(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += plane[y * w + x];
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

/// Mean local SSIM with a uniform window over valid positions, averaged over
/// frames and channels.
pub fn ssim(reference: &VideoVolume, candidate: &VideoVolume, p: &SsimParams) -> Result<f64> {
    same_dims(reference, candidate, "ssim")?;
    let [f, c, h, w] = reference.dims();
    let k = p.window;
    if k == 0 || h < k || w < k {
        return Err(Error::invalid(format!("SSIM window {k} does not fit {h}x{w} frames")));
    }
    let c1 = (p.k1 * p.dynamic_range).powi(2);
    let c2 = (p.k2 * p.dynamic_range).powi(2);
    let n = (k * k) as f64;
    let mut total = 0.0;
    for plane in 0..f * c {
        let a: Vec<f64> = reference.data()[plane * h * w..(plane + 1) * h * w].iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = candidate.data()[plane * h * w..(plane + 1) * h * w].iter().map(|&v| v as f64).collect();
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).collect::<Vec<_>>();
        let tables = [integral(&a, h, w), integral(&b, h, w), integral(&prod(&a, &a), h, w), integral(&prod(&b, &b), h, w), integral(&prod(&a, &b), h, w)];
        let box_sum = |s: &[f64], y: usize, x: usize| {
            let wd = w + 1;
            s[(y + k) * wd + x + k] - s[y * wd + x + k] - s[(y + k) * wd + x] + s[y * wd + x]
        };
        let mut acc = 0.0;
        for y in 0..=h - k {
            for x in 0..=w - k {
                let [sa, sb, saa, sbb, sab] = [0, 1, 2, 3, 4].map(|i| box_sum(&tables[i], y, x) / n);
                let (va, vb, cov) = (saa - sa * sa, sbb - sb * sb, sab - sa * sb);
                acc += ((2.0 * sa * sb + c1) * (2.0 * cov + c2)) / ((sa * sa + sb * sb + c1) * (va + vb + c2));
            }
        }
        total += acc / ((h - k + 1) * (w - k + 1)) as f64;
    }
    Ok(total / (f * c) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalConsistency {
    /// Mean cosine over usable consecutive pairs; `NaN` if none were usable.
    pub value: f64,
    /// Pairs skipped because a frame had zero variance.
    pub skipped: usize,
}

const TC_GRID: usize = 8;

/// Mean-centered 8×8 area-downsampled grayscale of one frame.
fn proxy_feature(video: &VideoVolume, f: usize) -> Vec<f64> {
    let [_, c, h, w] = video.dims();
    let mut feat = vec![0.0; TC_GRID * TC_GRID];
    for by in 0..TC_GRID {
        let (y0, y1) = (by * h / TC_GRID, (by + 1) * h / TC_GRID);
        for bx in 0..TC_GRID {
            let (x0, x1) = (bx * w / TC_GRID, (bx + 1) * w / TC_GRID);
            let mut s = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    for ci in 0..c {
                        s += video.at(f, ci, y, x) as f64;
                    }
                }
            }
            feat[by * TC_GRID + bx] = s / ((y1 - y0) * (x1 - x0) * c) as f64;
        }
    }
    let mean = feat.iter().sum::<f64>() / feat.len() as f64;
    feat.iter_mut().for_each(|v| *v -= mean);
    feat
}

/// Cosine similarity of consecutive-frame proxy features, averaged.
pub fn temporal_consistency(video: &VideoVolume) -> Result<TemporalConsistency> {
    if video.frames() < 2 {
        return Err(Error::invalid("temporal consistency needs at least two frames"));
    }
    if video.height() < TC_GRID || video.width() < TC_GRID {
        return Err(Error::invalid(format!("frames smaller than {TC_GRID}x{TC_GRID}")));
    }
    let feats: Vec<Vec<f64>> = (0..video.frames()).map(|f| proxy_feature(video, f)).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for pair in feats.windows(2) {
        let (na, nb) = (norm(&pair[0]), norm(&pair[1]));
        if na == 0.0 || nb == 0.0 {
            skipped += 1;
            continue;
        }
        total += pair[0].iter().zip(&pair[1]).map(|(a, b)| a * b).sum::<f64>() / (na * nb);
        used += 1;
    }
    let value = if used == 0 { f64::NAN } else { total / used as f64 };
    Ok(TemporalConsistency { value, skipped })
}

/// Fraction of masked pixels within L2 distance 0.5 of the prompt's color.
/// `NaN` for an empty mask.
pub fn prompt_alignment(edited: &VideoVolume, mask: &MaskVolume, prompt: &ScenePrompt) -> Result<f64> {
    mask.check_matches(edited)?;
    if edited.channels() != 3 {
        return Err(Error::shape("prompt_alignment", format!("expected 3 channels, got {}", edited.channels())));
    }
    let col = prompt.canonical_color();
    let (mut hits, mut n) = (0usize, 0usize);
    for f in 0..edited.frames() {
        for y in 0..edited.height() {
            for x in 0..edited.width() {
                if !mask.get(f, y, x) {
                    continue;
                }
                let d2: f64 = (0..3).map(|c| (edited.at(f, c, y, x) as f64 - col[c] as f64).powi(2)).sum();
                hits += (d2 <= 0.25) as usize;
                n += 1;
            }
        }
    }
    Ok(if n == 0 { f64::NAN } else { hits as f64 / n as f64 })
}

/// Replaces each non-key frame by its temporally nearest keyframe (ties go earlier).
pub fn copy_keyframe_baseline(video: &VideoVolume, keyframes: &[usize]) -> Result<VideoVolume> {
    if keyframes.is_empty() {
        return Err(Error::invalid("baseline needs at least one keyframe"));
    }
    if let Some(k) = keyframes.iter().find(|&&k| k >= video.frames()) {
        return Err(Error::invalid(format!("keyframe {k} outside 0..{}", video.frames())));
    }
    let mut out = video.clone();
    for f in 0..video.frames() {
        let src = *keyframes
            .iter()
            .min_by_key(|&&k| (k.abs_diff(f), k))
            .expect("non-empty");
        if src != f {
            out.frame_mut(f).copy_from_slice(video.frame(src));
        }
    }
    Ok(out)
}

/// Serializes non-finite values as the strings `"inf"`, `"-inf"`, `"nan"`.
mod sentinel {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("unknown sentinel {other:?}"))),
            },
        }
    }
}

/// Every metric for one reference/candidate pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(with = "sentinel")]
    pub bp_l1: f64,
    #[serde(with = "sentinel")]
    pub psnr_db: f64,
    #[serde(with = "sentinel")]
    pub ssim: f64,
    #[serde(with = "sentinel")]
    pub tc: f64,
    pub tc_skipped_pairs: usize,
    #[serde(with = "sentinel")]
    pub align: f64,
    /// Frames containing masked pixels, over which `psnr_db` is measured.
    pub psnr_frames: Vec<usize>,
}

/// Computes the full report. `align` is `NaN` without a prompt.
pub fn evaluate(
    reference: &VideoVolume,
    candidate: &VideoVolume,
    mask: &MaskVolume,
    prompt: Option<&ScenePrompt>,
) -> Result<EvalReport> {
    let mut frames: Vec<usize> = (0..mask.frames()).filter(|&f| mask.frame(f).iter().any(|&v| v != 0.0)).collect();
    if frames.is_empty() {
        frames = (0..reference.frames()).collect();
    }
    let tc = temporal_consistency(candidate)?;
    Ok(EvalReport {
        bp_l1: bp_l1(reference, candidate, mask)?,
        psnr_db: psnr_frames(reference, candidate, &frames, 2.0)?,
        ssim: ssim(reference, candidate, &SsimParams::default())?,
        tc: tc.value,
        tc_skipped_pairs: tc.skipped,
        align: match prompt {
            Some(p) => prompt_alignment(candidate, mask, p)?,
            None => f64::NAN,
        },
        psnr_frames: frames,
    })
}
