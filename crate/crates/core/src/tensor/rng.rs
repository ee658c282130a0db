//! Seeded random source.
//!
//! Streams come from ChaCha8 (counter-based, platform independent). Normal
//! draws use the polar-free Box–Muller transform, caching the second value of
//! each pair. Experiments derive independent labeled substreams with
//! [`Rng::fork`] so that adding consumers of one stream never perturbs another.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Matrix, Tensor};
use crate::error::{FlowError, Result};

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this generator's seed and `label`.
    /// Does not advance `self`.
    pub fn fork(&self, label: &str) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(fnv1a(label.as_bytes()))))
    }

    /// Independent stream derived from this generator's seed and an index.
    pub fn substream(&self, index: u64) -> Rng {
        Rng::new(splitmix64(splitmix64(self.seed) ^ splitmix64(index.wrapping_add(1))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n` (`n > 0`), rejection-sampled to avoid bias.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// ±1 with equal probability.
    pub fn rademacher(&mut self) -> f64 {
        if self.next_u64() >> 63 == 0 {
            -1.0
        } else {
            1.0
        }
    }

    pub fn rademacher_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.rademacher()).collect()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// Draw `mean + L z` with `z` standard normal and `lower` a lower-triangular
/// factor of the covariance. `lower` may be singular (e.g. all zeros).
pub fn gaussian_sample(rng: &mut Rng, mean: &Tensor, lower: &Matrix) -> Result<Tensor> {
    let n = mean.len();
    if lower.rows() != n || lower.cols() != n {
        return Err(FlowError::shape(format!(
            "mean has {n} entries, covariance factor is {}x{}",
            lower.rows(),
            lower.cols()
        )));
    }
    let z = rng.normal_vec(n);
    let data = (0..n)
        .map(|i| mean.data()[i] + super::dot(&lower.row(i)[..=i], &z[..=i]))
        .collect();
    mean.with_data(data)
}
