//! Video and mask volumes laid out as `[frames, channels, height, width]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Real-valued video in `[-1, 1]`, shape `[F, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoVolume(Tensor<f32>);

impl VideoVolume {
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        if t.rank() != 4 {
            return Err(Error::shape("video", format!("expected [F, C, H, W], got {:?}", t.shape())));
        }
        Ok(Self(t))
    }

    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        Self(Tensor::zeros(&[frames, channels, height, width]))
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.frames(), self.channels(), self.height(), self.width()]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<f32> {
        &mut self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        self.0.data_mut()
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.channels() * self.height() * self.width();
        &self.0.data()[f * n..(f + 1) * n]
    }

    pub fn frame_mut(&mut self, f: usize) -> &mut [f32] {
        let n = self.channels() * self.height() * self.width();
        &mut self.0.data_mut()[f * n..(f + 1) * n]
    }

    /// Pixel value at `(frame, channel, y, x)`.
    pub fn at(&self, f: usize, c: usize, y: usize, x: usize) -> f32 {
        let [_, ch, h, w] = self.dims();
        self.0.data()[((f * ch + c) * h + y) * w + x]
    }

    /// `x ⊙ (1 − m)`: the region to preserve.
    pub fn masked(&self, m: &MaskVolume) -> Result<Self> {
        m.check_matches(self)?;
        let mut out = self.clone();
        let [f, c, h, w] = self.dims();
        let plane = h * w;
        for fi in 0..f {
            let mrow = m.frame(fi);
            for ci in 0..c {
                let px = &mut out.0.data_mut()[(fi * c + ci) * plane..(fi * c + ci + 1) * plane];
                for (v, &mv) in px.iter_mut().zip(mrow) {
                    if mv != 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.0.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(Tensor::load(path)?)
    }

    /// Binary P6 image of one frame, mapping `[-1, 1]` linearly to `[0, 255]`.
    /// Single-channel videos are written as gray.
    pub fn frame_ppm(&self, f: usize) -> Vec<u8> {
        let [_, c, h, w] = self.dims();
        let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
        for y in 0..h {
            for x in 0..w {
                for k in 0..3 {
                    let v = self.at(f, if c >= 3 { k } else { 0 }, y, x);
                    out.push(((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8);
                }
            }
        }
        out
    }

    /// Writes `frame_%03d.ppm` for every frame into `dir`.
    pub fn write_ppm_frames(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for f in 0..self.frames() {
            let path = dir.join(format!("frame_{f:03}.ppm"));
            std::fs::write(&path, self.frame_ppm(f)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Binary mask `[F, 1, H, W]`; 1 marks pixels to synthesize.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume(Tensor<f32>);

impl MaskVolume {
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        if t.rank() != 4 || t.shape()[1] != 1 {
            return Err(Error::shape("mask", format!("expected [F, 1, H, W], got {:?}", t.shape())));
        }
        if let Some(i) = t.data().iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid(format!("mask value {} at index {i} is not 0 or 1", t.data()[i])));
        }
        Ok(Self(t))
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self(Tensor::zeros(&[frames, 1, height, width]))
    }

    pub fn ones(frames: usize, height: usize, width: usize) -> Self {
        Self(Tensor::full(&[frames, 1, height, width], 1.0))
    }

    /// Builds a mask from a per-pixel predicate `(frame, y, x)`.
    pub fn from_fn(frames: usize, height: usize, width: usize, f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(frames, height, width);
        let d = m.0.data_mut();
        for fi in 0..frames {
            for y in 0..height {
                for x in 0..width {
                    if f(fi, y, x) {
                        d[(fi * height + y) * width + x] = 1.0;
                    }
                }
            }
        }
        m
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.height() * self.width();
        &self.0.data()[f * n..(f + 1) * n]
    }

    pub fn get(&self, f: usize, y: usize, x: usize) -> bool {
        self.0.data()[(f * self.height() + y) * self.width() + x] != 0.0
    }

    pub fn set(&mut self, f: usize, y: usize, x: usize, on: bool) {
        let (h, w) = (self.height(), self.width());
        self.0.data_mut()[(f * h + y) * w + x] = if on { 1.0 } else { 0.0 };
    }

    pub fn count(&self) -> usize {
        self.0.data().iter().filter(|&&v| v != 0.0).count()
    }

    /// Fraction of masked pixels over the whole volume.
    pub fn coverage(&self) -> f64 {
        self.count() as f64 / self.0.numel() as f64
    }

    pub fn check_matches(&self, v: &VideoVolume) -> Result<()> {
        if (self.frames(), self.height(), self.width()) != (v.frames(), v.height(), v.width()) {
            return Err(Error::shape(
                "mask",
                format!("mask {:?} does not cover video {:?}", self.0.shape(), v.dims()),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.0.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(Tensor::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_rejects_non_binary() {
        let t = Tensor::new(vec![1, 1, 1, 2], vec![0.0, 0.5]).unwrap();
        assert!(MaskVolume::new(t).is_err());
        assert!(MaskVolume::new(Tensor::zeros(&[1, 2, 2, 2])).is_err());
    }

    #[test]
    fn complement_keeps_unmasked_region() {
        let v = VideoVolume::new(Tensor::full(&[2, 3, 2, 2], 0.5)).unwrap();
        let m = MaskVolume::from_fn(2, 2, 2, |f, y, _| f == 1 && y == 0);
        let xm = v.masked(&m).unwrap();
        for f in 0..2 {
            for c in 0..3 {
                for y in 0..2 {
                    for x in 0..2 {
                        let expect = if m.get(f, y, x) { 0.0 } else { 0.5 };
                        assert_eq!(xm.at(f, c, y, x), expect);
                    }
                }
            }
        }
    }

    #[test]
    fn ppm_header_and_mapping() {
        let mut v = VideoVolume::zeros(1, 3, 1, 2);
        v.data_mut().copy_from_slice(&[-1.0, 1.0, 0.0, 0.0, 1.0, -1.0]);
        let p = v.frame_ppm(0);
        assert!(p.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&p[p.len() - 6..], &[0, 128, 255, 255, 128, 0]);
    }
}
