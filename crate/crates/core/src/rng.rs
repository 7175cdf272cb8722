//! Seedable, splittable random stream.
//!
//! Every stochastic operation in the crate draws from a [`Stream`]. A stream is
//! a ChaCha8 generator identified by `(seed, stream id)`; substreams with
//! distinct ids are statistically independent, which lets callers hand out
//! deterministic streams to independent consumers without sharing state.
//!
//! Uniforms come from the generator's 53-bit mantissa construction, normals
//! from the Ziggurat method (`rand_distr::StandardNormal`).

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Open01, StandardNormal};

/// Well-known stream ids used by the training and evaluation drivers.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const PREDICT: u64 = 3;
    pub const BATCHES: u64 = 4;
    pub const POSTTRAIN: u64 = 5;
}

#[derive(Debug, Clone)]
pub struct Stream {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Self::with_id(seed, 0)
    }

    pub fn with_id(seed: u64, id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(id);
        Self { seed, inner }
    }

    /// Independent substream derived from this stream's seed.
    pub fn substream(&self, id: u64) -> Self {
        Self::with_id(self.seed, id)
    }

    /// Child stream whose seed is drawn from this stream (advances `self`).
    pub fn fork(&mut self) -> Self {
        Self::new(self.inner.next_u64())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform on the open interval `(0, 1)`.
    pub fn uniform_open(&mut self) -> f64 {
        self.inner.sample(Open01)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub(crate) fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }
}
