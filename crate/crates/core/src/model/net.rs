//! Graph construction for the denoiser forward pass.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::maskgen::resize_mask;
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::synthdata::VOCAB_SIZE;
use crate::video::{MaskVolume, VideoVolume};

use super::{codec, stage2_trainable, DenoiserModel, Site};

const NORM_EPS: f64 = 1e-5;

/// Adapter input: noisy latent, masked-video latent and the mask at latent resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBundle<F> {
    pub z_t: Tensor<F>,
    pub z0_m: Tensor<F>,
    pub m_resized: Tensor<F>,
}

impl<F: Scalar> LatentBundle<F> {
    pub fn new(z_t: Tensor<F>, z0_m: Tensor<F>, m_resized: Tensor<F>) -> Result<Self> {
        let (zs, ms) = (z_t.shape(), m_resized.shape());
        if zs.len() != 4 || z0_m.shape() != zs || ms.len() != 4 || ms[1] != 1 || ms[0] != zs[0] || ms[2..] != zs[2..] {
            return Err(Error::shape(
                "latent_bundle",
                format!("z_t {zs:?}, z0_m {:?}, m_resized {ms:?}", z0_m.shape()),
            ));
        }
        Ok(Self { z_t, z0_m, m_resized })
    }

    /// Encodes `x_0 ⊙ (1 − m)` and resizes `m` to the latent grid.
    pub fn conditioning(source: &VideoVolume, mask: &MaskVolume) -> Result<(Tensor<F>, Tensor<F>)> {
        mask.check_matches(source)?;
        let z0_m = codec::encode_latent(&source.masked(mask)?)?;
        let m = resize_mask(mask, source.height() / 2, source.width() / 2)?;
        Ok((z0_m.cast(), m.cast()))
    }

    pub fn frames(&self) -> usize {
        self.z_t.shape()[0]
    }
}

/// Replaces the learned gate.
#[derive(Clone, Debug, PartialEq)]
pub enum GateOverride {
    Learned,
    /// Fixed expert weights (must lie on the simplex).
    Fixed(Vec<f64>),
    /// Evaluate only this expert, without any mixture arithmetic.
    Single(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOptions {
    pub gate: GateOverride,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self { gate: GateOverride::Learned }
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub eps: Var,
    /// Gate output `[n]`, when the gate was evaluated.
    pub gate: Option<Var>,
    /// Raw adapter features per injected site (empty when the adapter is skipped).
    pub taps: Vec<(Site, Var)>,
    /// Base activation at each injected site after adding `ω_s·tap`.
    pub injected: Vec<(Site, Var)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Trainable {
    None,
    All,
    Stage2,
}

/// Maps parameter names to graph leaves for a single graph.
#[derive(Debug)]
pub struct Binding {
    vars: HashMap<String, Var>,
    mode: Trainable,
}

impl Binding {
    /// Every parameter enters as a constant.
    pub fn frozen() -> Self {
        Self { vars: HashMap::new(), mode: Trainable::None }
    }

    /// Every parameter receives gradients.
    pub fn all_trainable() -> Self {
        Self { vars: HashMap::new(), mode: Trainable::All }
    }

    /// Only stage-2 parameters receive gradients.
    pub fn stage2() -> Self {
        Self { vars: HashMap::new(), mode: Trainable::Stage2 }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        match self.mode {
            Trainable::None => false,
            Trainable::All => true,
            Trainable::Stage2 => stage2_trainable(name),
        }
    }

    /// Parameters touched by the graph, by name.
    pub fn vars(&self) -> &HashMap<String, Var> {
        &self.vars
    }
}

/// Which MoE block a standalone evaluation addresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MoeLevel {
    Enc1,
    Enc2,
}

impl MoeLevel {
    fn prefix(self) -> &'static str {
        match self {
            MoeLevel::Enc1 => "base.enc1.moe",
            MoeLevel::Enc2 => "base.enc2.moe",
        }
    }
}

/// Sinusoidal features of `pos`, `[dim]`.
fn sinusoid(pos: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half.max(1) as f64).exp();
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
    out
}

struct Net<'a, F> {
    g: &'a mut Graph<F>,
    model: &'a DenoiserModel<F>,
    bind: &'a mut Binding,
}

impl<F: Scalar> Net<'_, F> {
    fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bind.vars.get(name) {
            return Ok(v);
        }
        let t = self.model.param(name)?.clone();
        let v = if self.bind.is_trainable(name) { self.g.param(t) } else { self.g.constant(t) };
        self.bind.vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn has(&self, name: &str) -> bool {
        self.model.params().contains_key(name)
    }

    fn constant(&mut self, shape: &[usize], values: &[f64]) -> Result<Var> {
        Ok(self.g.constant(Tensor::from_f64(shape, values)?))
    }

    /// `x·W + b` over the last axis.
    fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        let y = self.g.matmul(x, w)?;
        self.g.add(y, b)
    }

    fn conv(&mut self, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        let y = self.g.conv(x, w, stride, pad)?;
        let rank = self.g.shape(y).len();
        let o = self.g.shape(b)[0];
        let mut bs = vec![o];
        bs.resize(rank - 1, 1);
        let b = self.g.reshape(b, &bs)?;
        self.g.add(y, b)
    }

    /// Normalizes each leading-axis slice over all remaining axes.
    fn norm_slices(&mut self, x: Var) -> Result<Var> {
        let s = self.g.shape(x).to_vec();
        let flat = self.g.reshape(x, &[s[0], s[1..].iter().product()])?;
        let n = self.g.layer_norm(flat, NORM_EPS);
        self.g.reshape(n, &s)
    }

    /// Residual block conditioned on `cond` (`[1, E]`).
    fn res(&mut self, x: Var, name: &str, cond: Var) -> Result<Var> {
        let h = self.norm_slices(x)?;
        let h = self.g.silu(h);
        let h = self.conv(h, &format!("{name}.conv1"), 1, 1)?;
        let c = self.g.silu(cond);
        let c = self.linear(c, &format!("{name}.cond"))?;
        let o = self.g.shape(c)[1];
        let c = self.g.reshape(c, &[1, o, 1, 1])?;
        let h = self.g.add(h, c)?;
        let h = self.norm_slices(h)?;
        let h = self.g.silu(h);
        let h = self.conv(h, &format!("{name}.conv2"), 1, 1)?;
        let skip_name = format!("{name}.skip");
        let skip = if self.has(&format!("{skip_name}.w")) { self.conv(x, &skip_name, 1, 0)? } else { x };
        self.g.add(h, skip)
    }

    /// Timestep embedding `[1, E]`.
    fn temb(&mut self, prefix: &str, t: usize) -> Result<Var> {
        let d = self.model.config().widths[0];
        let feat = self.constant(&[1, d], &sinusoid(t as f64, d))?;
        let h = self.linear(feat, &format!("{prefix}.l1"))?;
        let h = self.g.silu(h);
        self.linear(h, &format!("{prefix}.l2"))
    }

    /// Prompt tokens `[1, D]` via one-hot lookup into the embedding table.
    fn prompt(&mut self, token: usize) -> Result<Var> {
        if token >= VOCAB_SIZE {
            return Err(Error::invalid(format!("prompt token {token} outside vocabulary 0..{VOCAB_SIZE}")));
        }
        let mut hot = vec![0.0; VOCAB_SIZE];
        hot[token] = 1.0;
        let hot = self.constant(&[1, VOCAB_SIZE], &hot)?;
        let table = self.p("embed.table")?;
        self.g.matmul(hot, table)
    }

    /// Single-head self-attention over axis 1 of `x` (`[B, N, C]`).
    fn self_attention(&mut self, x: Var, name: &str) -> Result<Var> {
        let c = self.g.shape(x)[2];
        let q = self.linear(x, &format!("{name}.q"))?;
        let k = self.linear(x, &format!("{name}.k"))?;
        let v = self.linear(x, &format!("{name}.v"))?;
        let kt = self.g.permute(k, &[0, 2, 1])?;
        let s = self.g.matmul(q, kt)?;
        let s = self.g.scale(s, F::of(1.0 / (c as f64).sqrt()));
        let a = self.g.softmax(s);
        let o = self.g.matmul(a, v)?;
        self.linear(o, &format!("{name}.out"))
    }

    /// Cross-attention of tokens `x` (`[..., C]`) to context `ctx` (`[L, D]`).
    fn cross_attention(&mut self, x: Var, ctx: Var, name: &str) -> Result<Var> {
        let s = self.g.shape(x).to_vec();
        let c = *s.last().expect("rank >= 1");
        let flat = self.g.reshape(x, &[s.iter().product::<usize>() / c, c])?;
        let q = self.linear(flat, &format!("{name}.q"))?;
        let k = self.linear(ctx, &format!("{name}.k"))?;
        let v = self.linear(ctx, &format!("{name}.v"))?;
        let kt = self.g.permute(k, &[1, 0])?;
        let sc = self.g.matmul(q, kt)?;
        let sc = self.g.scale(sc, F::of(1.0 / (c as f64).sqrt()));
        let a = self.g.softmax(sc);
        let o = self.g.matmul(a, v)?;
        let o = self.linear(o, &format!("{name}.out"))?;
        self.g.reshape(o, &s)
    }

    /// Expert weights `[n]` from the resized mask `[F, 1, h, w]`.
    fn gate(&mut self, m: Var) -> Result<Var> {
        let s = self.g.shape(m).to_vec();
        let mut h = self.g.reshape(m, &[1, 1, s[0], s[2], s[3]])?;
        for i in 0..self.model.config().gate_layers {
            h = self.conv(h, &format!("gate.c{i}"), 2, 1)?;
            h = self.g.silu(h);
        }
        let hs = self.g.shape(h).to_vec();
        let cells: usize = hs[2..].iter().product();
        let flat = self.g.reshape(h, &[hs[1], cells])?;
        let pooled = self.g.sum_axis(flat, 1)?;
        let pooled = self.g.scale(pooled, F::of(1.0 / cells as f64));
        let pooled = self.g.reshape(pooled, &[1, hs[1]])?;
        let logits = self.linear(pooled, "gate.out")?;
        let w = self.g.softmax(logits);
        let n = self.model.config().experts;
        self.g.reshape(w, &[n])
    }

    fn expert(&mut self, y: Var, name: &str) -> Result<Var> {
        let h = self.linear(y, &format!("{name}.l1"))?;
        let h = self.g.gelu(h);
        self.linear(h, &format!("{name}.l2"))
    }

    /// `Σ_i w_i · e_i(y)` for `y` of shape `[N, C]`.
    fn mixture(&mut self, y: Var, prefix: &str, gate: &GateChoice) -> Result<Var> {
        let n = self.model.config().experts;
        match *gate {
            GateChoice::Single(i) => self.expert(y, &format!("{prefix}.expert{i}")),
            GateChoice::Weights(w) => {
                let ys = self.g.shape(y).to_vec();
                let mut outs = Vec::with_capacity(n);
                for i in 0..n {
                    let e = self.expert(y, &format!("{prefix}.expert{i}"))?;
                    outs.push(self.g.reshape(e, &[1, ys[0], ys[1]])?);
                }
                let stack = self.g.concat(&outs, 0)?;
                let w = self.g.reshape(w, &[n, 1, 1])?;
                let weighted = self.g.mul(stack, w)?;
                self.g.sum_axis(weighted, 0)
            }
        }
    }

    /// Temporal attention block with expert mixture; `x` is `[F, C, H, W]`.
    fn moe_block(&mut self, x: Var, prefix: &str, ctx: Var, gate: &GateChoice) -> Result<Var> {
        let s = self.g.shape(x).to_vec();
        let (f, c, h, w) = (s[0], s[1], s[2], s[3]);
        let widths = self.model.config().widths;
        if !widths.contains(&c) {
            return Err(Error::shape("moe_attention", format!("token width {c} matches no expert width {widths:?}")));
        }
        let mut tokens = self.temporal_tokens(x, prefix)?;
        let n = self.g.layer_norm(tokens, NORM_EPS);
        let a = self.cross_attention(n, ctx, &format!("{prefix}.xattn"))?;
        tokens = self.g.add(tokens, a)?;
        let n = self.g.layer_norm(tokens, NORM_EPS);
        let flat = self.g.reshape(n, &[h * w * f, c])?;
        let mix = self.mixture(flat, prefix, gate)?;
        let mix = self.g.reshape(mix, &[h * w, f, c])?;
        let tokens = self.g.add(tokens, mix)?;
        let grid = self.g.reshape(tokens, &[h, w, f, c])?;
        self.g.permute(grid, &[2, 3, 0, 1])
    }

    /// Two residual temporal self-attention layers (`{prefix}.t1`, `.t2`)
    /// with sinusoidal frame positions. Returns tokens `[H·W, F, C]`.
    fn temporal_tokens(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let s = self.g.shape(x).to_vec();
        let (f, c, h, w) = (s[0], s[1], s[2], s[3]);
        let tokens = self.g.permute(x, &[2, 3, 0, 1])?;
        let mut tokens = self.g.reshape(tokens, &[h * w, f, c])?;
        let pos: Vec<f64> = (0..f).flat_map(|i| sinusoid(i as f64, c)).collect();
        let pos = self.constant(&[f, c], &pos)?;
        for layer in ["t1", "t2"] {
            let n = self.g.layer_norm(tokens, NORM_EPS);
            let n = self.g.add(n, pos)?;
            let a = self.self_attention(n, &format!("{prefix}.{layer}"))?;
            tokens = self.g.add(tokens, a)?;
        }
        Ok(tokens)
    }

    /// Temporal self-attention on a feature map `[F, C, H, W]`, residual.
    fn temporal_attention(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let s = self.g.shape(x).to_vec();
        let tokens = self.temporal_tokens(x, prefix)?;
        let grid = self.g.reshape(tokens, &[s[2], s[3], s[0], s[1]])?;
        self.g.permute(grid, &[2, 3, 0, 1])
    }

    /// Spatial self-attention within each frame, residual.
    fn spatial_attention(&mut self, x: Var, name: &str) -> Result<Var> {
        let s = self.g.shape(x).to_vec();
        let t = self.g.permute(x, &[0, 2, 3, 1])?;
        let t = self.g.reshape(t, &[s[0], s[2] * s[3], s[1]])?;
        let n = self.g.layer_norm(t, NORM_EPS);
        let a = self.self_attention(n, name)?;
        let a = self.g.reshape(a, &[s[0], s[2], s[3], s[1]])?;
        let a = self.g.permute(a, &[0, 3, 1, 2])?;
        self.g.add(x, a)
    }

    /// Residual prompt cross-attention on a feature map `[F, C, H, W]`.
    fn map_cross_attention(&mut self, x: Var, ctx: Var, name: &str) -> Result<Var> {
        let s = self.g.shape(x).to_vec();
        let t = self.g.permute(x, &[0, 2, 3, 1])?;
        let n = self.g.layer_norm(t, NORM_EPS);
        let a = self.cross_attention(n, ctx, name)?;
        let a = self.g.permute(a, &[0, 3, 1, 2])?;
        debug_assert_eq!(self.g.shape(a), s.as_slice());
        self.g.add(x, a)
    }

    /// Nearest-neighbour ×2 upsampling of the last two axes.
    fn upsample(&mut self, x: Var) -> Result<Var> {
        let s = self.g.shape(x).to_vec();
        let (f, c, h, w) = (s[0], s[1], s[2], s[3]);
        let x6 = self.g.reshape(x, &[f, c, h, 1, w, 1])?;
        let ones = self.g.constant(Tensor::full(&[1, 1, 1, 2, 1, 2], F::ONE));
        let up = self.g.mul(x6, ones)?;
        self.g.reshape(up, &[f, c, 2 * h, 2 * w])
    }

    /// Adapter features per configured injection site.
    fn adapter(&mut self, b: &LatentBundle<F>, t: usize, ctx: Var) -> Result<BTreeMap<Site, Var>> {
        let z = self.g.constant(b.z_t.clone());
        let zm = self.g.constant(b.z0_m.clone());
        let m = self.g.constant(b.m_resized.clone());
        let x = self.g.concat(&[z, zm, m], 1)?;
        let cond = self.temb("adapter.temb", t)?;
        let h = self.conv(x, "adapter.in", 1, 1)?;
        let h = self.res(h, "adapter.enc1.res", cond)?;
        let f1 = self.temporal_attention(h, "adapter.enc1.temporal")?;
        let h = self.conv(f1, "adapter.down", 2, 1)?;
        let h = self.res(h, "adapter.enc2.res", cond)?;
        let f2 = self.temporal_attention(h, "adapter.enc2.temporal")?;
        let h = self.res(f2, "adapter.mid.res", cond)?;
        let f3 = self.map_cross_attention(h, ctx, "adapter.mid.xattn")?;
        let mut taps = BTreeMap::new();
        for &site in &self.model.config().injection_sites.clone() {
            let src = match site {
                Site::Enc1 | Site::Dec1 => f1,
                Site::Enc2 => f2,
                Site::Mid | Site::Dec2 => f3,
            };
            taps.insert(site, self.conv(src, &format!("adapter.tap.{}", site.name()), 1, 0)?);
        }
        Ok(taps)
    }

    fn forward(
        &mut self,
        b: &LatentBundle<F>,
        t: usize,
        prompt: usize,
        omega_s: f64,
        opts: &ForwardOptions,
    ) -> Result<ForwardVars> {
        let cfg = self.model.config().clone();
        let zs = b.z_t.shape();
        if zs[1] != cfg.latent_channels {
            return Err(Error::shape("denoise", format!("latent channels {} vs model {}", zs[1], cfg.latent_channels)));
        }
        if zs[2] % 2 != 0 || zs[3] % 2 != 0 {
            return Err(Error::shape("denoise", format!("latent extents {}x{} must be even", zs[2], zs[3])));
        }
        if !(omega_s >= 0.0 && omega_s.is_finite()) {
            return Err(Error::invalid(format!("omega_s must be finite and >= 0, got {omega_s}")));
        }
        let ctx = self.prompt(prompt)?;
        let temb = self.temb("base.temb", t)?;
        let (gate, gate_var) = match &opts.gate {
            GateOverride::Learned => {
                let m = self.g.constant(b.m_resized.clone());
                let w = self.gate(m)?;
                (GateChoice::Weights(w), Some(w))
            }
            GateOverride::Fixed(w) => {
                check_weights(w, cfg.experts)?;
                let v = self.constant(&[cfg.experts], w)?;
                (GateChoice::Weights(v), Some(v))
            }
            GateOverride::Single(i) => {
                if *i >= cfg.experts {
                    return Err(Error::invalid(format!("expert {i} outside 0..{}", cfg.experts)));
                }
                (GateChoice::Single(*i), None)
            }
        };
        let taps = if omega_s != 0.0 && !cfg.injection_sites.is_empty() {
            self.adapter(b, t, ctx)?
        } else {
            BTreeMap::new()
        };
        let mut injected = Vec::new();
        let mut inject = |net: &mut Self, site: Site, h: Var| -> Result<Var> {
            match taps.get(&site) {
                Some(&tap) => {
                    let s = net.g.scale(tap, F::of(omega_s));
                    let out = net.g.add(h, s)?;
                    injected.push((site, out));
                    Ok(out)
                }
                None => Ok(h),
            }
        };

        let z = self.g.constant(b.z_t.clone());
        let h = self.conv(z, "base.in", 1, 1)?;
        let h = self.res(h, "base.enc1.res", temb)?;
        let h = inject(self, Site::Enc1, h)?;
        let s1 = self.moe_block(h, "base.enc1.moe", ctx, &gate)?;
        let h = self.conv(s1, "base.down", 2, 1)?;
        let h = self.res(h, "base.enc2.res", temb)?;
        let h = inject(self, Site::Enc2, h)?;
        let s2 = self.moe_block(h, "base.enc2.moe", ctx, &gate)?;
        let h = self.res(s2, "base.mid.res", temb)?;
        let h = self.spatial_attention(h, "base.mid.attn")?;
        let h = inject(self, Site::Mid, h)?;
        let h = self.g.concat(&[h, s2], 1)?;
        let h = self.res(h, "base.dec2.res", temb)?;
        let h = inject(self, Site::Dec2, h)?;
        let h = self.upsample(h)?;
        let h = self.conv(h, "base.up", 1, 1)?;
        let h = self.g.concat(&[h, s1], 1)?;
        let h = self.res(h, "base.dec1.res", temb)?;
        let h = inject(self, Site::Dec1, h)?;
        let h = self.norm_slices(h)?;
        let h = self.g.silu(h);
        let residual = self.conv(h, "base.out", 1, 1)?;
        // Learned per-timestep skip from z_t: at high noise the target is close
        // to a scaled copy of the input, so the network only models the residual.
        let s = self.linear(temb, "base.skip")?;
        let s = self.g.reshape(s, &[1, 1, 1, 1])?;
        let skip = self.g.mul(z, s)?;
        let eps = self.g.add(residual, skip)?;
        Ok(ForwardVars { eps, gate: gate_var, taps: taps.into_iter().collect(), injected })
    }
}

enum GateChoice {
    Weights(Var),
    Single(usize),
}

fn check_weights(w: &[f64], n: usize) -> Result<()> {
    if w.len() != n {
        return Err(Error::invalid(format!("expected {n} expert weights, got {}", w.len())));
    }
    let sum: f64 = w.iter().sum();
    if w.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("expert weights {w:?} are not on the simplex")));
    }
    Ok(())
}

impl<F: Scalar> DenoiserModel<F> {
    /// Builds the forward pass into `g`. Parameters are bound lazily through
    /// `bind`, so only those on the active path appear in the graph.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        bind: &mut Binding,
        bundle: &LatentBundle<F>,
        t: usize,
        prompt: usize,
        omega_s: f64,
        opts: &ForwardOptions,
    ) -> Result<ForwardVars> {
        Net { g, model: self, bind }.forward(bundle, t, prompt, omega_s, opts)
    }

    /// Predicted noise for `bundle.z_t` at step `t`.
    pub fn denoise(&self, bundle: &LatentBundle<F>, t: usize, prompt: usize, omega_s: f64) -> Result<Tensor<F>> {
        self.denoise_with(bundle, t, prompt, omega_s, &ForwardOptions::default())
    }

    pub fn denoise_with(
        &self,
        bundle: &LatentBundle<F>,
        t: usize,
        prompt: usize,
        omega_s: f64,
        opts: &ForwardOptions,
    ) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, &mut Binding::frozen(), bundle, t, prompt, omega_s, opts)?;
        Ok(g.value(out.eps).clone())
    }

    /// Expert weights for a resized mask `[F, 1, h, w]`.
    pub fn gate_forward(&self, m_resized: &Tensor<F>) -> Result<Tensor<F>> {
        let s = m_resized.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::shape("gate_forward", format!("expected [F,1,h,w], got {s:?}")));
        }
        let mut g = Graph::new();
        let mut bind = Binding::frozen();
        let mut net = Net { g: &mut g, model: self, bind: &mut bind };
        let m = net.g.constant(m_resized.clone());
        let w = net.gate(m)?;
        Ok(g.value(w).clone())
    }

    /// Adapter features, one per configured injection site, in config order.
    pub fn adapter_forward(&self, bundle: &LatentBundle<F>, t: usize, prompt: usize) -> Result<Vec<Tensor<F>>> {
        let mut g = Graph::new();
        let mut bind = Binding::frozen();
        let mut net = Net { g: &mut g, model: self, bind: &mut bind };
        let ctx = net.prompt(prompt)?;
        let taps = net.adapter(bundle, t, ctx)?;
        Ok(self.config().injection_sites.iter().map(|s| g.value(taps[s]).clone()).collect())
    }

    /// Evaluates one MoE temporal block on `z` (`[F, C, H, W]`) with an
    /// explicit gate choice.
    pub fn moe_attention(&self, level: MoeLevel, z: &Tensor<F>, prompt: usize, gate: &GateOverride) -> Result<Tensor<F>> {
        let width = match level {
            MoeLevel::Enc1 => self.config().widths[0],
            MoeLevel::Enc2 => self.config().widths[1],
        };
        if z.rank() != 4 || z.shape()[1] != width {
            return Err(Error::shape("moe_attention", format!("expected [F,{width},H,W], got {:?}", z.shape())));
        }
        let mut g = Graph::new();
        let mut bind = Binding::frozen();
        let mut net = Net { g: &mut g, model: self, bind: &mut bind };
        let ctx = net.prompt(prompt)?;
        let choice = match gate {
            GateOverride::Learned => {
                return Err(Error::invalid("standalone MoE evaluation needs fixed or single-expert weights"))
            }
            GateOverride::Fixed(w) => {
                check_weights(w, self.config().experts)?;
                GateChoice::Weights(net.constant(&[w.len()], w)?)
            }
            GateOverride::Single(i) => {
                if *i >= self.config().experts {
                    return Err(Error::invalid(format!("expert {i} outside 0..{}", self.config().experts)));
                }
                GateChoice::Single(*i)
            }
        };
        let x = net.g.constant(z.clone());
        let out = net.moe_block(x, level.prefix(), ctx, &choice)?;
        Ok(g.value(out).clone())
    }

    /// The same model with the adapter removed entirely.
    pub fn base_only(&self) -> Self {
        let mut m = self.clone();
        m.config.injection_sites.clear();
        m.params.retain(|k, _| !k.starts_with("adapter."));
        m
    }
}
