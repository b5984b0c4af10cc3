//! Deterministic random number generation.
//!
//! Every source of randomness in the pipeline flows through [`Rng`], a thin
//! wrapper over ChaCha8 seeded from a `u64`. ChaCha output is stable across
//! platforms and crate versions, which is what makes the bit-for-bit
//! reproducibility contracts (identical metrics logs, identical checkpoint
//! bytes for a fixed seed) possible.

use rand_core::{RngCore, SeedableRng};

use crate::{lit, Scalar};

/// Seeded, stream-stable RNG.
pub struct Rng {
    inner: rand_chacha::ChaCha8Rng,
}

impl Rng {
    pub fn seed_from_u64(seed: u64) -> Self {
        Self {
            inner: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of entropy.
    pub fn uniform<S: Scalar>(&mut self) -> S {
        let v = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        lit(v)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_in<S: Scalar>(&mut self, lo: S, hi: S) -> S {
        lo + self.uniform::<S>() * (hi - lo)
    }

    /// Uniform integer in `[0, n)` by rejection-free modulo over a wide draw.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal<S: Scalar>(&mut self) -> S {
        let u1: f64 = ((self.next_u64() >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        lit((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos())
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// `k` distinct indices drawn from `0..n`, in ascending order.
    pub fn choose_sorted(&mut self, n: usize, k: usize) -> Vec<usize> {
        debug_assert!(k <= n);
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx.truncate(k);
        idx.sort_unstable();
        idx
    }
}

/// SplitMix64 step, used to derive independent per-(seed, index) streams.
pub fn mix(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
