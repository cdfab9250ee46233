//! Raw kernels over flat slices. Shape checking happens in the callers.

use super::Scalar;

/// `c (+)= op(a) * op(b)` where `op` optionally transposes a row-major matrix.
/// `a` is `m×k` after `op`, `b` is `k×n` after `op`, `c` is `m×n` row-major.
#[allow(clippy::too_many_arguments)]
pub fn matmul<F: Scalar>(
    a: &[F],
    trans_a: bool,
    b: &[F],
    trans_b: bool,
    c: &mut [F],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { F::ONE } else { F::ZERO };
    // SAFETY: slice lengths were asserted against the stated dimensions and
    // `c` is a unique borrow.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::ONE,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 3D convolution; 2D convolution is the `kd = 1` case.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub in_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn out_dims(&self) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for i in 0..3 {
            let padded = self.in_dims[i] + 2 * self.pad[i];
            if padded < self.kernel[i] || self.stride[i] == 0 {
                return None;
            }
            out[i] = (padded - self.kernel[i]) / self.stride[i] + 1;
        }
        Some(out)
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    fn in_len(&self) -> usize {
        self.channels * self.in_dims.iter().product::<usize>()
    }
}

/// Unfolds one volume `[C, D, H, W]` into columns `[C·kd·kh·kw, Do·Ho·Wo]`.
pub fn im2col<F: Scalar>(g: &ConvGeom, x: &[F], cols: &mut [F]) {
    let [od, oh, ow] = g.out_dims().expect("valid geometry");
    let [id, ih, iw] = g.in_dims;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let ncol = od * oh * ow;
    debug_assert_eq!(x.len(), g.in_len());
    debug_assert_eq!(cols.len(), g.patch_len() * ncol);
    let mut row = 0;
    for c in 0..g.channels {
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut cols[row * ncol..(row + 1) * ncol];
                    let mut j = 0;
                    for z in 0..od {
                        let zi = (z * sd + a) as isize - pd as isize;
                        for y in 0..oh {
                            let yi = (y * sh + b) as isize - ph as isize;
                            let dst_row = &mut dst[j..j + ow];
                            j += ow;
                            if zi < 0 || zi as usize >= id || yi < 0 || yi as usize >= ih {
                                dst_row.fill(F::ZERO);
                                continue;
                            }
                            let base = ((c * id + zi as usize) * ih + yi as usize) * iw;
                            let (lo, hi) = valid_range(ow, sw, e, pw, iw);
                            dst_row[..lo].fill(F::ZERO);
                            dst_row[hi..].fill(F::ZERO);
                            if lo < hi {
                                let x0 = lo * sw + e - pw;
                                if sw == 1 {
                                    dst_row[lo..hi].copy_from_slice(&x[base + x0..base + x0 + hi - lo]);
                                } else {
                                    for (k, d) in dst_row[lo..hi].iter_mut().enumerate() {
                                        *d = x[base + x0 + k * sw];
                                    }
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Output positions `lo..hi` along one axis whose input index
/// `o·stride + k − pad` falls inside `0..len`.
fn valid_range(out: usize, stride: usize, k: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k { ((len + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `dx`.
pub fn col2im<F: Scalar>(g: &ConvGeom, cols: &[F], dx: &mut [F]) {
    let [od, oh, ow] = g.out_dims().expect("valid geometry");
    let [id, ih, iw] = g.in_dims;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let ncol = od * oh * ow;
    let mut row = 0;
    for c in 0..g.channels {
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &cols[row * ncol..(row + 1) * ncol];
                    let mut j = 0;
                    for z in 0..od {
                        let zi = (z * sd + a) as isize - pd as isize;
                        for y in 0..oh {
                            let yi = (y * sh + b) as isize - ph as isize;
                            if zi < 0 || zi as usize >= id || yi < 0 || yi as usize >= ih {
                                j += ow;
                                continue;
                            }
                            let base = ((c * id + zi as usize) * ih + yi as usize) * iw;
                            let (lo, hi) = valid_range(ow, sw, e, pw, iw);
                            if lo < hi {
                                let x0 = lo * sw + e - pw;
                                for (k, &v) in src[j + lo..j + hi].iter().enumerate() {
                                    dx[base + x0 + k * sw] += v;
                                }
                            }
                            j += ow;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Forward convolution of `n` volumes. `w` is `[O, C·k]`, output `[n, O, Do·Ho·Wo]`.
pub fn conv_forward<F: Scalar>(g: &ConvGeom, n: usize, out_ch: usize, x: &[F], w: &[F], y: &mut [F]) {
    let ncol = g.out_dims().expect("valid geometry").iter().product::<usize>();
    let plen = g.patch_len();
    let in_len = g.in_len();
    let mut cols = vec![F::ZERO; plen * ncol];
    for i in 0..n {
        im2col(g, &x[i * in_len..(i + 1) * in_len], &mut cols);
        matmul(w, false, &cols, false, &mut y[i * out_ch * ncol..(i + 1) * out_ch * ncol], out_ch, plen, ncol, false);
    }
}

/// Accumulates gradients of a convolution into `dx` and `dw` (either optional).
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<F: Scalar>(
    g: &ConvGeom,
    n: usize,
    out_ch: usize,
    x: &[F],
    w: &[F],
    dy: &[F],
    mut dx: Option<&mut [F]>,
    mut dw: Option<&mut [F]>,
) {
    let ncol = g.out_dims().expect("valid geometry").iter().product::<usize>();
    let plen = g.patch_len();
    let in_len = g.in_len();
    let mut cols = vec![F::ZERO; plen * ncol];
    for i in 0..n {
        let dyi = &dy[i * out_ch * ncol..(i + 1) * out_ch * ncol];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(g, &x[i * in_len..(i + 1) * in_len], &mut cols);
            matmul(dyi, false, &cols, true, dw, out_ch, ncol, plen, true);
        }
        if let Some(dx) = dx.as_deref_mut() {
            matmul(w, true, dyi, false, &mut cols, plen, out_ch, ncol, false);
            col2im(g, &cols, &mut dx[i * in_len..(i + 1) * in_len]);
        }
    }
}

/// Catmull-Rom kernel (`a = -0.5`).
pub fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Dense `[out, in]` interpolation matrix for bicubic resampling along one
/// axis, half-pixel aligned, with edge replication. Rows sum to one.
pub fn cubic_resize_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = (o as f64 + 0.5) * scale - 0.5;
        let base = src.floor();
        let frac = src - base;
        let row = &mut m[o * input..(o + 1) * input];
        let mut total = 0.0;
        for tap in -1..=2i64 {
            let w = cubic_weight(frac - tap as f64);
            let idx = (base as i64 + tap).clamp(0, input as i64 - 1) as usize;
            row[idx] += w;
            total += w;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    m
}
