//! Noise schedule and the closed-form forward/reverse relations.
//!
//! Timesteps are 1-based: `t = 1..=T`. `alpha_bar(0)` is defined as 1.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Linear β schedule with derived α and ᾱ, stored in 64-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// `T` betas spaced linearly from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid("every beta must lie in (0, 1)"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self { beta, alpha, alpha_bar })
    }

    /// Desk-scale default: T = 200, β from 5e-4 to 0.06, ending at ᾱ_T ≈ 2e-3.
    ///
    /// Reusing the 1000-step range (1e-4 to 0.02) at T = 200 stops at
    /// ᾱ_T ≈ 0.13, far from the pure-noise start the sampler uses. The start
    /// is the 1000-step β_start scaled by 1000/T; the end keeps ᾱ_T near zero
    /// while √ᾱ_T stays large enough for f32 x0 reconstruction at every t.
    pub fn desk_default() -> Self {
        Self::linear(200, 5e-4, 0.06).expect("valid constants")
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// ᾱ_t for `t` in `0..=T`, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// Writes `beta.uptn`, `alpha.uptn` and `alpha_bar.uptn` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, v) in [("beta", &self.beta), ("alpha", &self.alpha), ("alpha_bar", &self.alpha_bar)] {
            Tensor::<f64>::new(vec![v.len()], v.clone())?.save(dir.join(format!("{name}.uptn")))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let beta = Tensor::<f64>::load(dir.as_ref().join("beta.uptn"))?.into_data();
        let s = Self::from_betas(beta)?;
        let alpha_bar = Tensor::<f64>::load(dir.as_ref().join("alpha_bar.uptn"))?;
        if alpha_bar.data() != s.alpha_bar.as_slice() {
            return Err(Error::Format("alpha_bar.uptn disagrees with beta.uptn".into()));
        }
        Ok(s)
    }
}

/// Forward-process draw together with the noise that produced it.
#[derive(Clone, Debug)]
pub struct DiffusionSample<F> {
    pub x_t: Tensor<F>,
    pub eps: Tensor<F>,
    pub t: usize,
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · eps`.
pub fn q_sample<F: Scalar>(x0: &Tensor<F>, t: usize, eps: &Tensor<F>, s: &NoiseSchedule) -> Result<Tensor<F>> {
    s.check(t)?;
    let ab = s.alpha_bar(t);
    let (a, b) = (F::of(ab.sqrt()), F::of((1.0 - ab).sqrt()));
    x0.zip_map(eps, "q_sample", |x, e| a * x + b * e)
}

/// One reverse step: `x_{t-1} = (x_t − (1 − α_t)/√(1 − ᾱ_t) · eps_hat) / √α_t`.
pub fn reconstruct_prev<F: Scalar>(
    x_t: &Tensor<F>,
    eps_hat: &Tensor<F>,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Tensor<F>> {
    s.check(t)?;
    let alpha = s.alpha(t);
    let coef = F::of((1.0 - alpha) / (1.0 - s.alpha_bar(t)).sqrt());
    let inv = F::of(1.0 / alpha.sqrt());
    x_t.zip_map(eps_hat, "reconstruct_prev", |x, e| inv * (x - coef * e))
}

/// `x0 = (x_t − √(1 − ᾱ_t) · eps) / √ᾱ_t`.
pub fn predict_x0<F: Scalar>(x_t: &Tensor<F>, eps: &Tensor<F>, t: usize, s: &NoiseSchedule) -> Result<Tensor<F>> {
    let ab = s.alpha_bar(t);
    let (a, b) = (F::of(1.0 / ab.sqrt()), F::of((1.0 - ab).sqrt()));
    x_t.zip_map(eps, "predict_x0", |x, e| a * (x - b * e))
}

/// Mean squared error over all elements.
pub fn epsilon_loss<F: Scalar>(eps: &Tensor<F>, eps_hat: &Tensor<F>) -> Result<F> {
    Ok(eps.zip_map(eps_hat, "epsilon_loss", |a, b| (a - b) * (a - b))?.mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{rng_normal, RandomStream};

    #[test]
    fn schedule_examples() {
        let s = NoiseSchedule::linear(10, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(3) - 0.729).abs() < 1e-12);
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        assert_eq!(s.beta(1000), 0.02);
        let mut oracle = 1.0f64;
        for i in 0..1000 {
            oracle *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        assert!(((s.alpha_bar(1000) - oracle) / oracle).abs() < 1e-9);
    }

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::desk_default();
        for t in 1..=s.steps() {
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            assert_eq!(s.alpha(t), 1.0 - s.beta(t));
            assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(200) > 1e-3 && s.alpha_bar(200) < 3e-3, "ᾱ_T = {}", s.alpha_bar(200));
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(5, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(5, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(5, 0.1, 1.0).is_err());
    }

    #[test]
    fn schedule_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = NoiseSchedule::linear(20, 1e-3, 0.05).unwrap();
        s.save(dir.path()).unwrap();
        assert_eq!(NoiseSchedule::load(dir.path()).unwrap(), s);
    }

    #[test]
    fn q_sample_limits() {
        let s = NoiseSchedule::linear(3, 1e-12, 1e-12).unwrap();
        let x0 = Tensor::<f64>::from_f64(&[3], &[0.5, -0.25, 1.0]).unwrap();
        let eps = Tensor::<f64>::from_f64(&[3], &[1.0, 2.0, -1.0]).unwrap();
        let xt = q_sample(&x0, 1, &eps, &s).unwrap();
        for (a, b) in xt.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        let s = NoiseSchedule::desk_default();
        let zero = Tensor::<f64>::zeros(&[3]);
        let xt = q_sample(&x0, 50, &zero, &s).unwrap();
        let k = s.alpha_bar(50).sqrt();
        assert_eq!(xt.data(), x0.map(|v| k * v).data());
        assert!(q_sample(&x0, 0, &zero, &s).is_err());
        assert!(q_sample(&x0, 1, &Tensor::zeros(&[2]), &s).is_err());
    }

    #[test]
    fn marginal_matches_iterated_chain() {
        // 1 − ᾱ_10 ≈ 0.3 keeps the ±0.02 band above 3.5 standard errors at n = 10^4.
        let s = NoiseSchedule::linear(10, 0.01, 0.06).unwrap();
        let x0 = [0.8f64, -0.5, 0.0, 0.3];
        let trials = 10_000;
        let mut stream = RandomStream::new(31);
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..trials {
            let mut x = x0;
            for t in 1..=10 {
                let (a, b) = (s.alpha(t).sqrt(), s.beta(t).sqrt());
                for v in x.iter_mut() {
                    *v = a * *v + b * stream.normal();
                }
            }
            for i in 0..4 {
                sum[i] += x[i];
                sq[i] += x[i] * x[i];
            }
        }
        let ab = s.alpha_bar(10);
        for i in 0..4 {
            let mean = sum[i] / trials as f64;
            let var = sq[i] / trials as f64 - mean * mean;
            assert!((mean - ab.sqrt() * x0[i]).abs() < 0.02, "mean {mean}");
            assert!((var - (1.0 - ab)).abs() < 0.02, "var {var}");
        }
    }

    #[test]
    fn reconstruct_prev_examples() {
        let s = NoiseSchedule::linear(1, 0.3, 0.3).unwrap();
        let mut stream = RandomStream::new(8);
        let x0: Tensor<f64> = rng_normal(&[16], &mut stream);
        let eps: Tensor<f64> = rng_normal(&[16], &mut stream);
        let x1 = q_sample(&x0, 1, &eps, &s).unwrap();
        let back = reconstruct_prev(&x1, &eps, 1, &s).unwrap();
        for (a, b) in back.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        // α_t → 1 with eps_hat = 0 is the identity map.
        let s = NoiseSchedule::linear(4, 1e-14, 1e-14).unwrap();
        let back = reconstruct_prev(&x1, &Tensor::zeros(&[16]), 2, &s).unwrap();
        for (a, b) in back.data().iter().zip(x1.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(reconstruct_prev(&x1, &eps, 5, &s).is_err());
    }

    #[test]
    fn reconstruct_prev_matches_scalar_formula() {
        let s = NoiseSchedule::desk_default();
        let mut stream = RandomStream::new(9);
        let xt: Tensor<f64> = rng_normal(&[2, 3, 4], &mut stream);
        let e: Tensor<f64> = rng_normal(&[2, 3, 4], &mut stream);
        let t = 137;
        let out = reconstruct_prev(&xt, &e, t, &s).unwrap();
        let alpha = 1.0 - (5e-4 + (0.06 - 5e-4) * (t - 1) as f64 / 199.0);
        let mut ab = 1.0;
        for i in 0..t {
            ab *= 1.0 - (5e-4 + (0.06 - 5e-4) * i as f64 / 199.0);
        }
        for i in 0..xt.numel() {
            let r = (xt.data()[i] - (1.0 - alpha) / (1.0 - ab).sqrt() * e.data()[i]) / alpha.sqrt();
            assert!((r - out.data()[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn epsilon_loss_examples() {
        let mut stream = RandomStream::new(10);
        let a: Tensor<f64> = rng_normal(&[3, 5], &mut stream);
        let b: Tensor<f64> = rng_normal(&[3, 5], &mut stream);
        assert_eq!(epsilon_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(epsilon_loss(&Tensor::<f64>::full(&[4], 1.0), &Tensor::zeros(&[4])).unwrap(), 1.0);
        let mut total = 0.0;
        for i in 0..15 {
            total += (a.data()[i] - b.data()[i]).powi(2);
        }
        assert!((epsilon_loss(&a, &b).unwrap() - total / 15.0).abs() < 1e-7);
        assert!(epsilon_loss(&a, &Tensor::zeros(&[15])).is_err());
    }

    #[test]
    fn x0_round_trip_every_t_f32() {
        let s = NoiseSchedule::desk_default();
        let mut stream = RandomStream::new(12);
        for t in 1..=s.steps() {
            let x0: Tensor<f32> = rng_normal(&[256], &mut stream).map(|v: f32| v.clamp(-1.0, 1.0));
            let eps: Tensor<f32> = rng_normal(&[256], &mut stream);
            let back = predict_x0(&q_sample(&x0, t, &eps, &s).unwrap(), &eps, t, &s).unwrap();
            for (a, b) in back.data().iter().zip(x0.data()) {
                assert!((a - b).abs() < 1e-5, "t={t} {a} vs {b}");
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn x0_round_trip_f32(seed in 0u64..500, t in 1usize..=200) {
            let s = NoiseSchedule::desk_default();
            let mut stream = RandomStream::new(seed);
            let x0: Tensor<f32> = rng_normal(&[32], &mut stream).map(|v: f32| v.clamp(-1.0, 1.0));
            let eps: Tensor<f32> = rng_normal(&[32], &mut stream);
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let back = predict_x0(&xt, &eps, t, &s).unwrap();
            for (a, b) in back.data().iter().zip(x0.data()) {
                proptest::prop_assert!((a - b).abs() < 1e-5,
                    "t={} {} vs {}", t, a, b);
            }
        }
    }
}
