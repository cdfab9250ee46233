//! Counter-based randomness.
//!
//! Every draw is `philox4x32_10(key = seed, ctr = [counter, stream])`, so the
//! value at a given `(seed, stream, counter)` never depends on how many draws
//! were taken elsewhere. Substreams are addressed by label and index.

use super::{Scalar, Tensor};

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

fn philox4x32_10(mut ctr: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        let p0 = u64::from(PHILOX_M0) * u64::from(ctr[0]);
        let p1 = u64::from(PHILOX_M1) * u64::from(ctr[2]);
        ctr = [
            ((p1 >> 32) as u32) ^ ctr[1] ^ k[0],
            p1 as u32,
            ((p0 >> 32) as u32) ^ ctr[3] ^ k[1],
            p0 as u32,
        ];
    }
    ctr
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xCBF2_9CE4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Reproducible random source addressed by `(seed, stream, counter)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RandomStream {
    seed: u64,
    stream: u64,
    counter: u64,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0, counter: 0 }
    }

    /// Repositions an existing stream; draws from here on are identical to
    /// any other stream with the same `(seed, stream, counter)`.
    pub fn at(&self, counter: u64) -> Self {
        Self { counter, ..self.clone() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Independent child stream named by `label`.
    pub fn substream(&self, label: &str) -> Self {
        self.substream_indexed(label, 0)
    }

    pub fn substream_indexed(&self, label: &str, index: u64) -> Self {
        let id = splitmix64(splitmix64(self.stream ^ fnv1a(label)).wrapping_add(index));
        Self { seed: self.seed, stream: id, counter: 0 }
    }

    fn block(&mut self) -> [u32; 4] {
        let c = self.counter;
        self.counter = self.counter.wrapping_add(1);
        philox4x32_10(
            [c as u32, (c >> 32) as u32, self.stream as u32, (self.stream >> 32) as u32],
            [self.seed as u32, (self.seed >> 32) as u32],
        )
    }

    fn block_u64(&mut self) -> (u64, u64) {
        let b = self.block();
        (
            u64::from(b[0]) | (u64::from(b[1]) << 32),
            u64::from(b[2]) | (u64::from(b[3]) << 32),
        )
    }

    pub fn next_u64(&mut self) -> u64 {
        self.block_u64().0
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "empty range");
        // Lemire's multiply-shift with rejection.
        loop {
            let x = self.next_u64();
            let m = u128::from(x) * u128::from(n);
            let low = m as u64;
            if low >= n.wrapping_neg() % n {
                return (m >> 64) as u64;
            }
        }
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn int_inclusive(&mut self, lo: i64, hi: i64) -> i64 {
        assert!(lo <= hi);
        lo + self.below((hi - lo) as u64 + 1) as i64
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Two independent standard normals (Box-Muller on one counter block).
    pub fn normal_pair(&mut self) -> (f64, f64) {
        let (a, b) = self.block_u64();
        let u1 = ((a >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        (r * theta.cos(), r * theta.sin())
    }

    pub fn normal(&mut self) -> f64 {
        self.normal_pair().0
    }

    /// Index drawn from a categorical distribution given by `probs`.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let u = self.uniform();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
    }
}

/// Tensor of i.i.d. standard normal draws; advances `stream` by `ceil(n / 2)`.
pub fn rng_normal<F: Scalar>(shape: &[usize], stream: &mut RandomStream) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n + 1);
    while data.len() < n {
        let (a, b) = stream.normal_pair();
        data.push(F::of(a));
        data.push(F::of(b));
    }
    data.truncate(n);
    Tensor::new(shape.to_vec(), data).expect("shape matches draw count")
}
