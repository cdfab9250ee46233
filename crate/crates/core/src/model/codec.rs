//! Exact space-to-depth latent codec with factor 2.
//!
//! `[F, C, H, W]` maps to `[F, 4C, H/2, W/2]`; latent channel `c·4 + dy·2 + dx`
//! holds pixel `(2y + dy, 2x + dx)` of input channel `c`.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::video::VideoVolume;

pub fn space_to_depth<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let &[f, c, h, w] = x.shape() else {
        return Err(Error::shape("encode_latent", format!("expected [F,C,H,W], got {:?}", x.shape())));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("encode_latent", format!("extents {h}x{w} must be even")));
    }
    let (lh, lw) = (h / 2, w / 2);
    let src = x.data();
    let mut out = vec![F::ZERO; x.numel()];
    for fi in 0..f {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let lc = ci * 4 + (y % 2) * 2 + xx % 2;
                    out[((fi * 4 * c + lc) * lh + y / 2) * lw + xx / 2] = src[((fi * c + ci) * h + y) * w + xx];
                }
            }
        }
    }
    Tensor::new(vec![f, 4 * c, lh, lw], out)
}

pub fn depth_to_space<F: Scalar>(z: &Tensor<F>) -> Result<Tensor<F>> {
    let &[f, lc, lh, lw] = z.shape() else {
        return Err(Error::shape("decode_latent", format!("expected [F,C,h,w], got {:?}", z.shape())));
    };
    if lc % 4 != 0 {
        return Err(Error::shape("decode_latent", format!("latent channels {lc} not divisible by 4")));
    }
    let (c, h, w) = (lc / 4, lh * 2, lw * 2);
    let src = z.data();
    let mut out = vec![F::ZERO; z.numel()];
    for fi in 0..f {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let k = ci * 4 + (y % 2) * 2 + xx % 2;
                    out[((fi * c + ci) * h + y) * w + xx] = src[((fi * lc + k) * lh + y / 2) * lw + xx / 2];
                }
            }
        }
    }
    Tensor::new(vec![f, c, h, w], out)
}

pub fn encode_latent(x: &VideoVolume) -> Result<Tensor<f32>> {
    space_to_depth(x.tensor())
}

pub fn decode_latent(z: &Tensor<f32>) -> Result<VideoVolume> {
    VideoVolume::new(depth_to_space(z)?)
}
