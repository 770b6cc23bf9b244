//! Seeded, splittable randomness.
//!
//! Every consumer of randomness (noise trees, threshold selection, simulated
//! clients, query workloads) takes its own [`RandomSource`]. A source is a
//! ChaCha20 keystream keyed by `seed` and positioned on the 64-bit stream
//! `stream_id`, so sources that differ only in `stream_id` never overlap.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

/// Well-known sub-stream tags used across the crate.
pub mod streams {
    pub const THRESHOLD: u64 = 1;
    pub const PERTURBER: u64 = 2;
    pub const CLIENTS_HOLDOUT: u64 = 3;
    pub const CLIENTS_STREAM: u64 = 4;
    pub const WORKLOAD: u64 = 5;
    pub const SYNTHETIC: u64 = 6;
}

#[derive(Debug, Clone)]
pub struct RandomSource {
    seed: u64,
    stream_id: u64,
    rng: ChaCha20Rng,
}

impl RandomSource {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A fresh source on a child stream. Deterministic in `(seed, stream_id, tag)`
    /// and independent of how many draws `self` has already produced.
    pub fn derive(&self, tag: u64) -> RandomSource {
        RandomSource::new(self.seed, mix(self.stream_id, tag))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on the open interval `(0, 1)`.
    #[inline]
    pub fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `[0, n)`, rejection sampled so there is no modulo bias.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }
}

// splitmix64 finalizer over the pair; keeps derived stream ids well spread.
fn mix(stream_id: u64, tag: u64) -> u64 {
    let mut z = stream_id
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(tag)
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
