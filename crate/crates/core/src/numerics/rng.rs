// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded pseudo-random source.
//!
//! xoshiro256++ seeded through SplitMix64, with Box–Muller for normal draws.
//! Both algorithms are fixed, so a seed reproduces the same stream on every
//! platform and release.

use nalgebra::{DMatrix, DVector};
use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

const STREAM_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

/// Deterministic generator owned by a single job.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: Xoshiro256PlusPlus,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Independent stream `stream` for the same base seed.
    pub fn stream(seed: u64, stream: u64) -> Self {
        Self::new(seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(STREAM_STRIDE)))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (Lemire's multiply-shift with rejection).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as usize;
            }
        }
    }

    /// Standard normal via Box–Muller; the second variate is cached.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - U keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare_normal = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.standard_normal()
    }

    pub fn normal_vector(&mut self, len: usize, mean: f64, sd: f64) -> DVector<f64> {
        DVector::from_fn(len, |_, _| self.normal(mean, sd))
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// `rows × cols` matrix of i.i.d. Normal(mean, sd²) entries, filled row-major.
pub fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, mean: f64, sd: f64) -> DMatrix<f64> {
    assert!(sd >= 0.0, "negative standard deviation");
    let values: Vec<f64> = (0..rows * cols).map(|_| rng.normal(mean, sd)).collect();
    DMatrix::from_row_slice(rows, cols, &values)
}
