//! Seeded random numbers with stable stream derivation.
//!
//! All randomness in the crate flows through [`Rng`] so that a run is fully
//! reproducible from one `u64` seed. Independent consumers (parameter init,
//! dropout, epoch shuffles) derive their own streams via [`Rng::derive`]
//! instead of sharing one generator, so adding a draw in one place never
//! shifts another.

use crate::scalar::Scalar;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// splitmix64 finalizer; used to spread seed/stream words before keying ChaCha.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn seed_from(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(mix(seed)))
    }

    /// Stream `stream` of the generator family keyed by `seed`.
    pub fn derive(seed: u64, stream: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(mix(mix(seed) ^ stream)))
    }

    /// Stream keyed by two indices (e.g. purpose and epoch).
    pub fn derive2(seed: u64, stream: u64, index: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(mix(mix(mix(seed) ^ stream) ^ index)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform<T: Scalar>(&mut self, lo: f64, hi: f64) -> T {
        T::from_f64(lo + (hi - lo) * self.next_f64())
    }

    /// Uniform index in [0, n). `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        // Rejection sampling keeps the draw unbiased.
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.0.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<E>(&mut self, xs: &mut [E]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

/// Stream tags for [`Rng::derive`].
pub mod streams {
    pub const PARAMS: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_streams() {
        let a: Vec<u64> = {
            let mut r = Rng::derive(42, 1);
            (0..8).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = Rng::derive(42, 1);
            (0..8).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
        let c: Vec<u64> = {
            let mut r = Rng::derive(42, 2);
            (0..8).map(|_| r.next_u64()).collect()
        };
        assert_ne!(a, c);
    }

    #[test]
    fn uniform_range() {
        let mut r = Rng::seed_from(7);
        for _ in 0..1000 {
            let v: f64 = r.uniform(-0.25, 0.25);
            assert!((-0.25..0.25).contains(&v));
        }
    }

    #[test]
    fn shuffle_permutes() {
        let mut r = Rng::seed_from(3);
        let mut xs: Vec<usize> = (0..100).collect();
        r.shuffle(&mut xs);
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(xs, (0..100).collect::<Vec<_>>());
    }
}
