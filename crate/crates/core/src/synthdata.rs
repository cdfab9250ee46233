//! Procedural moving-shape clips with exact object masks and prompt tokens.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RandomStream, Tensor};
use crate::video::{MaskVolume, VideoVolume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Linear,
    Circular,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, -1.0, -1.0],
            Color::Green => [-1.0, 1.0, -1.0],
            Color::Blue => [-1.0, -1.0, 1.0],
            Color::Yellow => [1.0, 1.0, -1.0],
        }
    }

    fn name(self) -> &'static str {
        ["red", "green", "blue", "yellow"][self as usize]
    }
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    fn name(self) -> &'static str {
        ["square", "circle", "triangle"][self as usize]
    }

    /// Whether offset `(dy, dx)` from the center is inside a shape of half-size `r`.
    fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            ShapeKind::Square => dy.abs() <= r && dx.abs() <= r,
            ShapeKind::Circle => dy * dy + dx * dx <= r * r,
            ShapeKind::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

impl Motion {
    pub const ALL: [Motion; 2] = [Motion::Linear, Motion::Circular];

    fn name(self) -> &'static str {
        ["linear", "circular"][self as usize]
    }
}

/// Token id of the null prompt.
pub const NULL_TOKEN: usize = 0;
/// Null token plus every (color, shape, motion) combination.
pub const VOCAB_SIZE: usize = 1 + 4 * 3 * 2;

/// A non-null vocabulary entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ScenePrompt {
    pub color: Color,
    pub shape: ShapeKind,
    pub motion: Motion,
}

impl ScenePrompt {
    pub fn token_id(&self) -> usize {
        1 + ((self.color as usize) * 3 + self.shape as usize) * 2 + self.motion as usize
    }

    pub fn from_token(id: usize) -> Option<Self> {
        if id == NULL_TOKEN || id >= VOCAB_SIZE {
            return None;
        }
        let k = id - 1;
        Some(Self {
            color: Color::ALL[k / 6],
            shape: ShapeKind::ALL[(k / 2) % 3],
            motion: Motion::ALL[k % 2],
        })
    }

    pub fn canonical_color(&self) -> [f32; 3] {
        self.color.rgb()
    }

    /// Every non-null prompt in token order.
    pub fn vocabulary() -> Vec<ScenePrompt> {
        (1..VOCAB_SIZE).filter_map(Self::from_token).collect()
    }

    /// Parses names such as `red-square-linear`.
    pub fn parse(name: &str) -> Option<Self> {
        Self::vocabulary().into_iter().find(|p| p.to_string() == name)
    }
}

impl fmt::Display for ScenePrompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-{}", self.color.name(), self.shape.name(), self.motion.name())
    }
}

/// Spatial and temporal extents of generated clips.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Shape half-size in pixels; `None` picks `max(2, min(H, W) / 8)`.
    pub shape_radius: Option<usize>,
    pub background_amplitude: f32,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self { frames: 8, height: 32, width: 32, shape_radius: None, background_amplitude: 0.2 }
    }
}

impl ClipConfig {
    pub fn new(frames: usize, height: usize, width: usize) -> Self {
        Self { frames, height, width, ..Self::default() }
    }

    pub fn radius(&self) -> usize {
        self.shape_radius.unwrap_or_else(|| (self.height.min(self.width) / 8).max(2))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub video: VideoVolume,
    pub object_mask: MaskVolume,
    pub prompt: ScenePrompt,
    pub seed: u64,
}

const NOISE_GRID: usize = 4;

/// Smooth value noise on a coarse grid, sampled with a per-clip phase offset.
fn background(cfg: &ClipConfig, stream: &mut RandomStream) -> Vec<f32> {
    let (h, w) = (cfg.height, cfg.width);
    let g = NOISE_GRID + 2;
    let mut out = vec![0.0f32; 3 * h * w];
    for c in 0..3 {
        let lattice: Vec<f64> = (0..g * g).map(|_| stream.uniform_range(-1.0, 1.0)).collect();
        let (py, px) = (stream.uniform(), stream.uniform());
        for y in 0..h {
            for x in 0..w {
                let fy = py + y as f64 * NOISE_GRID as f64 / h as f64;
                let fx = px + x as f64 * NOISE_GRID as f64 / w as f64;
                let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
                let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
                let (ty, tx) = (smooth(fy - iy as f64), smooth(fx - ix as f64));
                let l = |a: usize, b: usize| lattice[(iy + a) * g + ix + b];
                let top = l(0, 0) * (1.0 - tx) + l(0, 1) * tx;
                let bottom = l(1, 0) * (1.0 - tx) + l(1, 1) * tx;
                let v = top * (1.0 - ty) + bottom * ty;
                out[(c * h + y) * w + x] = (v * cfg.background_amplitude as f64) as f32;
            }
        }
    }
    out
}

/// Per-frame shape centers `(y, x)`.
fn trajectory(cfg: &ClipConfig, motion: Motion, stream: &mut RandomStream) -> Vec<(f64, f64)> {
    let r = cfg.radius() as i64;
    let (h, w, f) = (cfg.height as i64, cfg.width as i64, cfg.frames as i64);
    match motion {
        Motion::Linear => {
            // Integer per-frame velocity so every footprint is an exact translate.
            let vmax = |extent: i64| (extent - 1 - 2 * r) / (f - 1);
            let (vy_max, vx_max) = (vmax(h), vmax(w));
            let (vy, vx) = loop {
                let vy = stream.int_inclusive(-vy_max, vy_max);
                let vx = stream.int_inclusive(-vx_max, vx_max);
                if vy.abs() + vx.abs() >= vy_max.max(vx_max).max(1) {
                    break (vy, vx);
                }
            };
            let mut start = |v: i64, extent: i64| {
                let travel = v * (f - 1);
                let lo = r - travel.min(0);
                let hi = extent - 1 - r - travel.max(0);
                stream.int_inclusive(lo, hi)
            };
            let (y0, x0) = (start(vy, h), start(vx, w));
            (0..f).map(|i| ((y0 + vy * i) as f64, (x0 + vx * i) as f64)).collect()
        }
        Motion::Circular => {
            let room = (h.min(w) as f64 - 1.0) / 2.0 - r as f64;
            let orbit = (room * stream.uniform_range(0.5, 1.0)).max(0.0);
            let cy = stream.uniform_range(r as f64 + orbit, h as f64 - 1.0 - r as f64 - orbit);
            let cx = stream.uniform_range(r as f64 + orbit, w as f64 - 1.0 - r as f64 - orbit);
            let phase = stream.uniform_range(0.0, std::f64::consts::TAU);
            let dir = if stream.bernoulli(0.5) { 1.0 } else { -1.0 };
            (0..f)
                .map(|i| {
                    let th = phase + dir * std::f64::consts::PI * i as f64 / f as f64;
                    (cy + orbit * th.sin(), cx + orbit * th.cos())
                })
                .collect()
        }
    }
}

/// Renders one clip; a pure function of `(config, prompt, seed)`.
pub fn gen_clip(cfg: &ClipConfig, prompt: ScenePrompt, seed: u64) -> Result<SyntheticClip> {
    if cfg.frames < 2 || cfg.height < 8 || cfg.width < 8 {
        return Err(Error::invalid(format!(
            "clip needs F >= 2 and H, W >= 8, got {}x{}x{}",
            cfg.frames, cfg.height, cfg.width
        )));
    }
    let r = cfg.radius();
    if 2 * r + 1 + cfg.frames - 1 > cfg.height.min(cfg.width) {
        return Err(Error::invalid(format!(
            "shape of radius {r} does not fit a moving path in a {}x{} frame",
            cfg.height, cfg.width
        )));
    }
    let stream = RandomStream::new(seed);
    let bg = background(cfg, &mut stream.substream("background"));
    let centers = trajectory(cfg, prompt.motion, &mut stream.substream("trajectory"));
    let (f, h, w) = (cfg.frames, cfg.height, cfg.width);
    let rf = r as f64;
    let mask = MaskVolume::from_fn(f, h, w, |fi, y, x| {
        let (cy, cx) = centers[fi];
        prompt.shape.contains(y as f64 - cy, x as f64 - cx, rf)
    });
    let color = prompt.canonical_color();
    let mut data = Vec::with_capacity(f * 3 * h * w);
    for fi in 0..f {
        let m = mask.frame(fi);
        for (c, &col) in color.iter().enumerate() {
            for p in 0..h * w {
                data.push(if m[p] != 0.0 { col } else { bg[c * h * w + p] });
            }
        }
    }
    let video = VideoVolume::new(Tensor::new(vec![f, 3, h, w], data)?)?;
    Ok(SyntheticClip { video, object_mask: mask, prompt, seed })
}

/// `n` clips with prompts uniform over the non-null vocabulary.
pub fn gen_dataset(n: usize, cfg: &ClipConfig, master_seed: u64) -> Result<Vec<SyntheticClip>> {
    if n == 0 {
        return Err(Error::invalid("dataset needs at least one clip"));
    }
    let root = RandomStream::new(master_seed);
    (0..n as u64)
        .map(|i| {
            let mut s = root.substream_indexed("clip", i);
            let prompt = ScenePrompt::from_token(1 + s.below((VOCAB_SIZE - 1) as u64) as usize).expect("non-null");
            gen_clip(cfg, prompt, s.next_u64())
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct PromptFile {
    token_id: usize,
    shape: ShapeKind,
    color: Color,
    motion: Motion,
    seed: String,
}

pub fn clip_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("clip_{index:06}"))
}

/// Writes `clip_%06d/{video.uptn, mask.uptn, prompt.json}` under `root`.
pub fn save_dataset(root: impl AsRef<Path>, clips: &[SyntheticClip]) -> Result<()> {
    let root = root.as_ref();
    for (i, clip) in clips.iter().enumerate() {
        let dir = clip_dir(root, i);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        clip.video.save(dir.join("video.uptn"))?;
        clip.object_mask.save(dir.join("mask.uptn"))?;
        let meta = PromptFile {
            token_id: clip.prompt.token_id(),
            shape: clip.prompt.shape,
            color: clip.prompt.color,
            motion: clip.prompt.motion,
            seed: clip.seed.to_string(),
        };
        let path = dir.join("prompt.json");
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Json { path: path.clone(), source: e })?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Reads every `clip_%06d` directory under `root` in index order.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Vec<SyntheticClip>> {
    let root = root.as_ref();
    let mut clips = Vec::new();
    loop {
        let dir = clip_dir(root, clips.len());
        if !dir.is_dir() {
            break;
        }
        let video = VideoVolume::load(dir.join("video.uptn"))?;
        let object_mask = MaskVolume::load(dir.join("mask.uptn"))?;
        let path = dir.join("prompt.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: PromptFile = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?;
        let prompt = ScenePrompt::from_token(meta.token_id)
            .ok_or_else(|| Error::Format(format!("{}: token {} is not a scene prompt", path.display(), meta.token_id)))?;
        if (prompt.color, prompt.shape, prompt.motion) != (meta.color, meta.shape, meta.motion) {
            return Err(Error::Format(format!("{}: token id disagrees with its fields", path.display())));
        }
        let seed = meta
            .seed
            .parse()
            .map_err(|_| Error::Format(format!("{}: seed {:?} is not an integer", path.display(), meta.seed)))?;
        object_mask.check_matches(&video)?;
        clips.push(SyntheticClip { video, object_mask, prompt, seed });
    }
    if clips.is_empty() {
        return Err(Error::Format(format!("no clip_000000 directory under {}", root.display())));
    }
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn red_square(motion: Motion) -> ScenePrompt {
        ScenePrompt { color: Color::Red, shape: ShapeKind::Square, motion }
    }

    #[test]
    fn vocabulary_round_trips() {
        let vocab = ScenePrompt::vocabulary();
        assert_eq!(vocab.len(), 24);
        for (i, p) in vocab.iter().enumerate() {
            assert_eq!(p.token_id(), i + 1);
            assert_eq!(ScenePrompt::parse(&p.to_string()), Some(*p));
        }
        assert_eq!(ScenePrompt::from_token(NULL_TOKEN), None);
        assert_eq!(red_square(Motion::Linear).to_string(), "red-square-linear");
    }

    #[test]
    fn linear_centroids_are_collinear() {
        for seed in 0..20 {
            let clip = gen_clip(&ClipConfig::default(), red_square(Motion::Linear), seed).unwrap();
            let cents: Vec<(f64, f64)> = (0..8)
                .map(|f| {
                    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
                    for y in 0..32 {
                        for x in 0..32 {
                            if clip.object_mask.get(f, y, x) {
                                sy += y as f64;
                                sx += x as f64;
                                n += 1.0;
                            }
                        }
                    }
                    (sy / n, sx / n)
                })
                .collect();
            let (a, b) = (cents[0], cents[7]);
            let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
            assert!(len > 0.0);
            for &(y, x) in &cents {
                let dist = ((b.1 - a.1) * (y - a.0) - (b.0 - a.0) * (x - a.1)).abs() / len;
                assert!(dist <= 0.5, "seed {seed}: {dist}");
            }
        }
    }

    #[test]
    fn masked_region_has_canonical_color_and_mask_is_exact() {
        for token in 1..VOCAB_SIZE {
            let p = ScenePrompt::from_token(token).unwrap();
            let clip = gen_clip(&ClipConfig::default(), p, token as u64).unwrap();
            let col = p.canonical_color();
            let mut sums = [0.0f64; 3];
            let n = clip.object_mask.count() as f64;
            for f in 0..8 {
                for y in 0..32 {
                    for x in 0..32 {
                        let inside = clip.object_mask.get(f, y, x);
                        for c in 0..3 {
                            let v = clip.video.at(f, c, y, x);
                            assert!((-1.0..=1.0).contains(&v));
                            if inside {
                                sums[c] += v as f64;
                            } else {
                                assert!(v.abs() <= 0.2 + 1e-6);
                            }
                        }
                    }
                }
            }
            for c in 0..3 {
                assert!((sums[c] / n - col[c] as f64).abs() < 0.05);
            }
        }
    }

    #[test]
    fn clips_are_deterministic() {
        let p = red_square(Motion::Circular);
        let a = gen_clip(&ClipConfig::default(), p, 99).unwrap();
        let b = gen_clip(&ClipConfig::default(), p, 99).unwrap();
        assert_eq!(a.video.tensor().to_bytes(), b.video.tensor().to_bytes());
        assert_eq!(a, b);
        assert_ne!(a, gen_clip(&ClipConfig::default(), p, 100).unwrap());
    }

    #[test]
    fn rejects_oversized_shapes() {
        let cfg = ClipConfig { shape_radius: Some(14), ..ClipConfig::default() };
        assert!(gen_clip(&cfg, red_square(Motion::Linear), 0).is_err());
        assert!(gen_clip(&ClipConfig::new(1, 32, 32), red_square(Motion::Linear), 0).is_err());
    }

    #[test]
    fn dataset_token_frequencies_uniform() {
        let cfg = ClipConfig::new(2, 8, 8);
        let clips = gen_dataset(1000, &cfg, 5).unwrap();
        let mut counts = vec![0usize; VOCAB_SIZE];
        for c in &clips {
            counts[c.prompt.token_id()] += 1;
        }
        let p: f64 = 1.0 / 24.0;
        let (mean, sd): (f64, f64) = (1000.0 * p, (1000.0 * p * (1.0 - p)).sqrt());
        for &c in &counts[1..] {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "{counts:?}");
        }
        assert_eq!(counts[NULL_TOKEN], 0);
    }

    #[test]
    fn dataset_determinism_and_io() {
        let cfg = ClipConfig::default();
        let a = gen_dataset(3, &cfg, 17).unwrap();
        assert_eq!(a, gen_dataset(3, &cfg, 17).unwrap());
        assert_eq!(gen_dataset(1, &cfg, 17).unwrap().len(), 1);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &a).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), a);
        let text = std::fs::read_to_string(dir.path().join("clip_000001/prompt.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["seed"], serde_json::Value::String(a[1].seed.to_string()));
    }
}
