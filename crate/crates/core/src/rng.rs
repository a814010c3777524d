//! Seeded random streams.
//!
//! Every stochastic routine in the crate draws from a [`SeededRng`]: the
//! ChaCha20 stream cipher keyed by `seed` (expanded with `SeedableRng::seed_from_u64`)
//! and positioned on an explicit stream id, so independent consumers of one
//! seed never overlap. On top of the raw 64-bit words:
//!
//! * uniforms take the top 53 bits: `u = (w >> 11) * 2^-53`, in `[0, 1)`;
//! * Gaussians use Box-Muller on a pair `(u1, u2)` with `u1` mapped to `(0, 1]`,
//!   returning `r cos(2 pi u2)` first and caching `r sin(2 pi u2)` for the next call;
//! * bounded integers use rejection on the 64-bit word (no modulo bias).

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

use crate::grid::ImageGrid;

/// Stream ids used by the crate so that one seed can feed several consumers.
pub mod streams {
    pub const SAMPLER: u64 = 0;
    pub const DEGRADATION_SPEC: u64 = 1;
    pub const DEGRADATION_NOISE: u64 = 2;
    pub const GROUND_TRUTH: u64 = 3;
    pub const ORACLE: u64 = 4;
}

const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha20Rng,
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            inner,
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_M53
    }

    /// Uniform in `[lo, hi]` (the upper end is hit with probability zero).
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_inclusive(&mut self, lo: i64, hi: i64) -> i64 {
        assert!(lo <= hi, "empty integer range");
        let span = (hi - lo) as u64 + 1;
        if span == 0 {
            return self.next_u64() as i64;
        }
        // largest multiple of span that fits in u64
        let zone = u64::MAX - (u64::MAX % span + 1) % span;
        loop {
            let w = self.next_u64();
            if w <= zone {
                return lo + (w % span) as i64;
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

    /// Standard normal grid, filled in row-major order.
    pub fn normal_grid(&mut self, height: usize, width: usize) -> ImageGrid {
        let values = (0..height * width).map(|_| self.normal()).collect();
        ImageGrid::from_raw(height, width, values)
    }

    /// Index drawn with probability proportional to `weights`.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let target = self.uniform() * total;
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            last_positive = i;
            acc += w;
            if target < acc {
                return i;
            }
        }
        last_positive
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn streams_differ() {
        let mut a = SeededRng::with_stream(42, 0);
        let mut b = SeededRng::with_stream(42, 1);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn normal_moments() {
        let mut rng = SeededRng::new(7);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());
        // sd of sample variance for N(0,1) is sqrt(2/n)
        assert!((var - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn int_inclusive_hits_both_ends() {
        let mut rng = SeededRng::new(3);
        let draws: Vec<i64> = (0..10_000).map(|_| rng.int_inclusive(60, 100)).collect();
        assert_eq!(*draws.iter().min().unwrap(), 60);
        assert_eq!(*draws.iter().max().unwrap(), 100);
    }

    #[test]
    fn categorical_skips_zero_weights() {
        let mut rng = SeededRng::new(1);
        for _ in 0..10_000 {
            assert_eq!(rng.categorical(&[1.0, 0.0]), 0);
            assert_eq!(rng.categorical(&[0.0, 1.0]), 1);
        }
    }
}
