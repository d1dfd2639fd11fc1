//! Seeded random stream shared by every stochastic component.
//!
//! Stream contract `chacha8-v1`: the raw source is ChaCha8 seeded with
//! `seed_from_u64(seed)` on stream `stream`. Conversions from each raw
//! 64-bit word `x`:
//!
//! * integer in `[lo, hi]` (inclusive): `lo + ((x as u128 * (hi - lo + 1)) >> 64)`
//! * real in `[lo, hi)`: `lo + (hi - lo) * ((x >> 11) as f64 * 2^-53)`
//!
//! Each conversion consumes exactly one word.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const STREAM_CONTRACT: &str = "chacha8-v1";

#[derive(Clone, Debug)]
pub struct StreamRng {
    inner: ChaCha8Rng,
}

impl StreamRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::new(seed, 0)
    }

    pub fn next_word(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `[lo, hi]`. Caller guarantees `lo <= hi`.
    pub fn int_inclusive(&mut self, lo: i64, hi: i64) -> i64 {
        debug_assert!(lo <= hi);
        let span = (hi - lo) as u128 + 1;
        lo + ((self.next_word() as u128 * span) >> 64) as i64
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.int_inclusive(0, n as i64 - 1) as usize
    }

    /// Uniform real in `[lo, hi)`.
    pub fn real(&mut self, lo: f64, hi: f64) -> f64 {
        let unit = (self.next_word() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        lo + (hi - lo) * unit
    }

    pub fn unit(&mut self) -> f64 {
        self.real(0.0, 1.0)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    /// Child seed for an independent sub-stream.
    pub fn fork(&mut self) -> u64 {
        self.next_word()
    }
}

/// Uniform integer frame offset in `[lo, hi]`.
pub fn sample_delta(rng: &mut StreamRng, lo: i64, hi: i64) -> Result<i64> {
    if lo > hi {
        return Err(Error::config(format!("delta bounds inverted: {lo} > {hi}")));
    }
    Ok(rng.int_inclusive(lo, hi))
}

/// Stable 64-bit mix of a seed and a tag, for deriving per-sample seeds.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
