//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and the backward sweep is a single reverse pass.

use super::kernels::{self, ConvGeom};
use super::tensor::strides;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    MatMul(Var, Var),
    Conv { x: Var, w: Var, geom: ConvGeom, n: usize, out_ch: usize },
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Gelu(Var),
    Silu(Var),
    LayerNorm { x: Var, rstd: Vec<F> },
    Softmax(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Resize { x: Var, ry: Vec<F>, rx: Vec<F>, in_hw: (usize, usize), out_hw: (usize, usize) },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// The tape: records values and the primitive that produced each.
#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient with respect to `v`; zeros if `v` is not on the loss path.
    pub fn wrt(&self, v: Var) -> Tensor<F> {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor<F> {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn gelu_parts<F: Scalar>(x: F) -> (F, F) {
    // tanh approximation
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let k = F::of(0.044715);
    let half = F::of(0.5);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let y = half * x * (F::ONE + th);
    let dy = half * (F::ONE + th) + half * x * (F::ONE - th * th) * c * (F::ONE + F::of(3.0) * k * x * x);
    (y, dy)
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::ONE / (F::ONE + (-x).exp())
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` expressed in the (right-aligned) rank of `out`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| if i < off || shape[i - off] == 1 { 0 } else { s[i - off] })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let mut o = 0;
    for _ in 0..outer {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..rank - 1 {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Sums `grad` (shaped `out`) down to `target` using broadcast strides.
fn reduce_broadcast<F: Scalar>(grad: &[F], out: &[usize], target: &[usize]) -> Tensor<F> {
    if out == target {
        return Tensor::new(target.to_vec(), grad.to_vec()).expect("same shape");
    }
    let st = broadcast_strides(target, out);
    let zero = vec![0; out.len()];
    let mut acc = Tensor::zeros(target);
    let data = acc.data_mut();
    for_each_broadcast(out, &st, &zero, |o, it, _| data[it] += grad[o]);
    acc
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, bool, Vec<usize>)> {
    // Returns (batch, n, k, m, shared_rhs, out_shape).
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", format!("{a:?} x {b:?}: rank < 2")));
    }
    let (n, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, m) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(Error::shape("matmul", format!("{a:?} x {b:?}: inner extents differ")));
    }
    let mut out = a[..a.len() - 2].to_vec();
    out.extend([n, m]);
    if b.len() == 2 {
        let batch: usize = a[..a.len() - 2].iter().product();
        return Ok((batch, n, k, m, true, out));
    }
    if a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(Error::shape("matmul", format!("{a:?} x {b:?}: batch extents differ")));
    }
    let batch: usize = a[..a.len() - 2].iter().product();
    Ok((batch, n, k, m, false, out))
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(F, F) -> F) -> Result<(Tensor<F>, bool)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let out = if sa == sb {
            Tensor::new(sa, va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect())?
        } else {
            let os = broadcast_shape(&sa, &sb)
                .ok_or_else(|| Error::shape(name, format!("cannot broadcast {sa:?} with {sb:?}")))?;
            let (ta, tb) = (broadcast_strides(&sa, &os), broadcast_strides(&sb, &os));
            let mut out = Tensor::zeros(&os);
            let d = out.data_mut();
            for_each_broadcast(&os, &ta, &tb, |o, i, j| d[o] = f(va[i], vb[j]));
            out
        };
        Ok((out, self.ng(a) || self.ng(b)))
    }

    /// Broadcasting `a + b`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, g) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, g) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), g))
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, g) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let v = self.value(a).map(|x| x * s);
        let g = self.ng(a);
        self.push(v, Op::Scale(a, s), g)
    }

    /// `[..., n, k] x [k, m]` (shared right operand) or batched `[B.., n, k] x [B.., k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (batch, n, k, m, shared, os) = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = Tensor::zeros(&os);
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            let d = out.data_mut();
            if shared {
                kernels::matmul(va, false, vb, false, d, batch * n, k, m, false);
            } else {
                for i in 0..batch {
                    kernels::matmul(
                        &va[i * n * k..(i + 1) * n * k],
                        false,
                        &vb[i * k * m..(i + 1) * k * m],
                        false,
                        &mut d[i * n * m..(i + 1) * n * m],
                        n,
                        k,
                        m,
                        false,
                    );
                }
            }
        }
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), g))
    }

    /// Convolution with zero padding. `x` is `[N, C, H, W]` with `w` `[O, C, kh, kw]`,
    /// or `[N, C, D, H, W]` with `w` `[O, C, kd, kh, kw]`. Stride and padding apply
    /// uniformly to every spatial axis.
    pub fn conv(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let spatial = match (xs.len(), ws.len()) {
            (4, 4) => 2,
            (5, 5) => 3,
            _ => return Err(Error::shape("conv", format!("input {xs:?}, weight {ws:?}"))),
        };
        if xs[1] != ws[1] {
            return Err(Error::shape("conv", format!("input channels {} vs weight {}", xs[1], ws[1])));
        }
        let (in_dims, kernel, strides3, pad3) = if spatial == 2 {
            ([1, xs[2], xs[3]], [1, ws[2], ws[3]], [1, stride, stride], [0, pad, pad])
        } else {
            ([xs[2], xs[3], xs[4]], [ws[2], ws[3], ws[4]], [stride; 3], [pad; 3])
        };
        let geom = ConvGeom { channels: xs[1], in_dims, kernel, stride: strides3, pad: pad3 };
        let od = geom
            .out_dims()
            .ok_or_else(|| Error::shape("conv", format!("kernel {ws:?} larger than padded input {xs:?}")))?;
        let (n, out_ch) = (xs[0], ws[0]);
        let mut os = vec![n, out_ch];
        if spatial == 3 {
            os.push(od[0]);
        }
        os.extend([od[1], od[2]]);
        let mut out = Tensor::zeros(&os);
        kernels::conv_forward(&geom, n, out_ch, self.value(x).data(), self.value(w).data(), out.data_mut());
        let g = self.ng(x) || self.ng(w);
        Ok(self.push(out, Op::Conv { x, w, geom, n, out_ch }, g))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let g = self.ng(a);
        self.push(v, Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        let g = self.ng(a);
        self.push(v, Op::Mean(a), g)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut os = s.clone();
        os.remove(axis);
        let mut out = Tensor::zeros(&os);
        {
            let src = self.value(a).data();
            let d = out.data_mut();
            for o in 0..outer {
                for j in 0..s[axis] {
                    let row = &src[(o * s[axis] + j) * inner..(o * s[axis] + j + 1) * inner];
                    for (dst, &v) in d[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                        *dst += v;
                    }
                }
            }
        }
        let g = self.ng(a);
        Ok(self.push(out, Op::SumAxis(a, axis), g))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| gelu_parts(x).0);
        let g = self.ng(a);
        self.push(v, Op::Gelu(a), g)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let g = self.ng(a);
        self.push(v, Op::Silu(a), g)
    }

    /// Normalizes over the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let src = self.value(a);
        let d = *src.shape().last().unwrap_or(&1);
        let rows = src.numel() / d;
        let mut out = src.clone();
        let mut rstd = Vec::with_capacity(rows);
        for row in out.data_mut().chunks_mut(d) {
            let mean = row.iter().copied().sum::<F>() / F::of(d as f64);
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() / F::of(d as f64);
            let r = F::ONE / (var + F::of(eps)).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            rstd.push(r);
        }
        let g = self.ng(a);
        self.push(out, Op::LayerNorm { x: a, rstd }, g)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let d = *out.shape().last().unwrap_or(&1);
        for row in out.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        let g = self.ng(a);
        self.push(out, Op::Softmax(a), g)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut os = first.clone();
        os[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let g = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(os, data)?, Op::Concat { parts: parts.to_vec(), axis }, g))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let g = self.ng(a);
        Ok(self.push(v, Op::Reshape(a), g))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} for {s:?}")));
        }
        let v = permute_tensor(self.value(a), perm);
        let g = self.ng(a);
        Ok(self.push(v, Op::Permute { x: a, perm: perm.to_vec() }, g))
    }

    /// Bicubic (Catmull-Rom) resampling of the last two axes.
    pub fn resize(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 || out_h == 0 || out_w == 0 {
            return Err(Error::shape("resize", format!("{s:?} -> {out_h}x{out_w}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let ry: Vec<F> = kernels::cubic_resize_matrix(h, out_h).into_iter().map(F::of).collect();
        let rx: Vec<F> = kernels::cubic_resize_matrix(w, out_w).into_iter().map(F::of).collect();
        let mut os = s.clone();
        let r = os.len();
        os[r - 2] = out_h;
        os[r - 1] = out_w;
        let planes = self.value(a).numel() / (h * w);
        let mut out = Tensor::zeros(&os);
        let mut tmp = vec![F::ZERO; out_h * w];
        {
            let src = self.value(a).data();
            let d = out.data_mut();
            for p in 0..planes {
                kernels::matmul(&ry, false, &src[p * h * w..(p + 1) * h * w], false, &mut tmp, out_h, h, w, false);
                kernels::matmul(&tmp, false, &rx, true, &mut d[p * out_h * out_w..(p + 1) * out_h * out_w], out_h, w, out_w, false);
            }
        }
        let g = self.ng(a);
        Ok(self.push(out, Op::Resize { x: a, ry, rx, in_hw: (h, w), out_hw: (out_h, out_w) }, g))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), F::ONE));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.propagate(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, gout: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[i];
        let gd = gout.data();
        let mut acc = |v: Var, g: Tensor<F>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e += *x;
                    }
                }
                slot => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let os = node.value.shape();
                let ga = reduce_broadcast(gd, os, self.shape(*a));
                let mut gb = reduce_broadcast(gd, os, self.shape(*b));
                if matches!(node.op, Op::Sub(..)) {
                    gb = gb.map(|x| -x);
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Mul(a, b) => {
                let os = node.value.shape();
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let (ta, tb) = (broadcast_strides(sa, os), broadcast_strides(sb, os));
                let mut ga = Tensor::zeros(sa);
                let mut gb = Tensor::zeros(sb);
                {
                    let (da, db) = (ga.data_mut(), gb.data_mut());
                    for_each_broadcast(os, &ta, &tb, |o, x, y| {
                        da[x] += gd[o] * vb[y];
                        db[y] += gd[o] * va[x];
                    });
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Scale(a, s) => acc(*a, gout.map(|x| x * *s)),
            Op::MatMul(a, b) => {
                let (batch, n, k, m, shared, _) =
                    matmul_dims(self.shape(*a), self.shape(*b)).expect("validated in forward");
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = Tensor::zeros(self.shape(*a));
                let mut gb = Tensor::zeros(self.shape(*b));
                if shared {
                    kernels::matmul(gd, false, vb, true, ga.data_mut(), batch * n, m, k, false);
                    kernels::matmul(va, true, gd, false, gb.data_mut(), k, batch * n, m, false);
                } else {
                    for t in 0..batch {
                        let go = &gd[t * n * m..(t + 1) * n * m];
                        kernels::matmul(go, false, &vb[t * k * m..(t + 1) * k * m], true, &mut ga.data_mut()[t * n * k..(t + 1) * n * k], n, m, k, false);
                        kernels::matmul(&va[t * n * k..(t + 1) * n * k], true, go, false, &mut gb.data_mut()[t * k * m..(t + 1) * k * m], k, n, m, false);
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Conv { x, w, geom, n, out_ch } => {
                let (nx, nw) = (self.ng(*x), self.ng(*w));
                let mut gx = nx.then(|| Tensor::zeros(self.shape(*x)));
                let mut gw = nw.then(|| Tensor::zeros(self.shape(*w)));
                kernels::conv_backward(
                    geom,
                    *n,
                    *out_ch,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    gx.as_mut().map(|t| t.data_mut()),
                    gw.as_mut().map(|t| t.data_mut()),
                );
                if let Some(g) = gx {
                    acc(*x, g);
                }
                if let Some(g) = gw {
                    acc(*w, g);
                }
            }
            Op::Sum(a) => acc(*a, Tensor::full(self.shape(*a), gd[0])),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                acc(*a, Tensor::full(self.shape(*a), gd[0] / F::of(n as f64)))
            }
            Op::SumAxis(a, axis) => {
                let s = self.shape(*a);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut g = Tensor::zeros(s);
                let d = g.data_mut();
                for o in 0..outer {
                    for j in 0..s[*axis] {
                        d[(o * s[*axis] + j) * inner..(o * s[*axis] + j + 1) * inner]
                            .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                acc(*a, g);
            }
            Op::Gelu(a) => {
                let g = self.value(*a).zip_map(gout, "gelu", |x, dy| dy * gelu_parts(x).1).expect("same shape");
                acc(*a, g);
            }
            Op::Silu(a) => {
                let g = self
                    .value(*a)
                    .zip_map(gout, "silu", |x, dy| {
                        let s = sigmoid(x);
                        dy * s * (F::ONE + x * (F::ONE - s))
                    })
                    .expect("same shape");
                acc(*a, g);
            }
            Op::LayerNorm { x, rstd } => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap_or(&1);
                let inv_d = F::of(1.0 / d as f64);
                let mut g = Tensor::zeros(node.value.shape());
                for ((gx, (yr, dyr)), &r) in g
                    .data_mut()
                    .chunks_mut(d)
                    .zip(y.chunks(d).zip(gd.chunks(d)))
                    .zip(rstd)
                {
                    let mean_dy = dyr.iter().copied().sum::<F>() * inv_d;
                    let mean_dyy = dyr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<F>() * inv_d;
                    for j in 0..d {
                        gx[j] = r * (dyr[j] - mean_dy - yr[j] * mean_dyy);
                    }
                }
                acc(*x, g);
            }
            Op::Softmax(a) => {
                let s = node.value.data();
                let d = *node.value.shape().last().unwrap_or(&1);
                let mut g = Tensor::zeros(node.value.shape());
                for (gx, (sr, dyr)) in g.data_mut().chunks_mut(d).zip(s.chunks(d).zip(gd.chunks(d))) {
                    let dot = sr.iter().zip(dyr).map(|(&a, &b)| a * b).sum::<F>();
                    for j in 0..d {
                        gx[j] = sr[j] * (dyr[j] - dot);
                    }
                }
                acc(*a, g);
            }
            Op::Concat { parts, axis } => {
                let os = node.value.shape();
                let outer: usize = os[..*axis].iter().product();
                let inner: usize = os[axis + 1..].iter().product();
                let row = os[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    let mut data = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        data.extend_from_slice(&gd[o * row + offset..o * row + offset + len]);
                    }
                    offset += len;
                    acc(p, Tensor::new(self.shape(p).to_vec(), data).expect("slice shape"));
                }
            }
            Op::Reshape(a) => acc(*a, gout.clone().reshape(self.shape(*a)).expect("same numel")),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                acc(*x, permute_tensor(gout, &inv));
            }
            Op::Resize { x, ry, rx, in_hw: (h, w), out_hw: (oh, ow) } => {
                let planes = gout.numel() / (oh * ow);
                let mut g = Tensor::zeros(self.shape(*x));
                let mut tmp = vec![F::ZERO; oh * w];
                let d = g.data_mut();
                for p in 0..planes {
                    kernels::matmul(&gd[p * oh * ow..(p + 1) * oh * ow], false, rx, false, &mut tmp, *oh, *ow, *w, false);
                    kernels::matmul(ry, true, &tmp, false, &mut d[p * h * w..(p + 1) * h * w], *h, *oh, *w, false);
                }
                acc(*x, g);
            }
        }
    }
}

fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(row[0], F::max);
    let mut total = F::ZERO;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Axis permutation of a plain tensor; output axis `i` is input axis `perm[i]`.
pub fn permute_tensor<F: Scalar>(t: &Tensor<F>, perm: &[usize]) -> Tensor<F> {
    let s = t.shape();
    let os: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let src_strides = strides(s);
    let gathered: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let zero = vec![0; os.len()];
    let src = t.data();
    let mut out = Tensor::zeros(&os);
    let d = out.data_mut();
    for_each_broadcast(&os, &gathered, &zero, |o, i, _| d[o] = src[i]);
    out
}

/// Softmax of a rank-1 tensor. Rejects empty input and non-finite entries.
pub fn softmax<F: Scalar>(v: &Tensor<F>) -> Result<Tensor<F>> {
    if v.rank() != 1 {
        return Err(Error::shape("softmax", format!("expected rank 1, got {:?}", v.shape())));
    }
    if let Some(index) = v.first_non_finite() {
        return Err(Error::NonFinite { context: "softmax input".into(), index });
    }
    let mut out = v.clone();
    softmax_in_place(out.data_mut());
    Ok(out)
}

/// Central finite differences of a scalar function, one coordinate at a time.
pub fn finite_diff_grad<F: Scalar>(f: impl Fn(&Tensor<F>) -> F, x: &Tensor<F>, h: F) -> Tensor<F> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (F::of(2.0) * h);
    }
    out
}
