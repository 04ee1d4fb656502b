//! Seeded, stream-separated randomness.
//!
//! Every stochastic phase of a run draws from its own ChaCha stream derived
//! from `(seed, stream id)`, so adding draws to one phase never perturbs
//! another. All draws are reproducible bit-for-bit on one machine for a
//! fixed seed.

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};

/// Stream ids, one per pipeline phase.
pub mod stream {
    pub const DATA_TRAIN: u64 = 1;
    pub const DATA_VAL: u64 = 2;
    pub const ROTATION: u64 = 3;
    pub const MODEL_INIT: u64 = 4;
    pub const TRAIN_LOOP: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const METRIC_MC: u64 = 7;
    pub const TEACHER: u64 = 8;
}

/// Deterministic RNG bound to a `(seed, stream)` pair.
#[derive(Clone)]
pub struct Rng {
    inner: ChaCha12Rng,
    /// Box-Muller spare; part of the resumable state.
    cached: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha12Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Rng { inner, cached: None }
    }

    /// Uniform in [0, 1). 53-bit mantissa resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller. One draw per call; the second value
    /// of each pair is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.cache_take() {
            return z;
        }
        loop {
            let u1 = self.uniform();
            if u1 <= 0.0 {
                continue;
            }
            let u2 = self.uniform();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            self.cache_put(r * theta.sin());
            return r * theta.cos();
        }
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Index drawn from the categorical distribution given by `weights`
    /// (non-negative, need not be normalized).
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            u -= w;
            if u < 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = (self.inner.next_u64() % (i as u64 + 1)) as usize;
            xs.swap(i, j);
        }
    }

    /// Snapshot of the generator state for checkpointing.
    pub fn state(&self) -> RngState {
        RngState {
            seed: self.inner.get_seed(),
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
            cached: self.cached,
        }
    }

    pub fn from_state(s: &RngState) -> Self {
        let mut inner = ChaCha12Rng::from_seed(s.seed);
        inner.set_stream(s.stream);
        inner.set_word_pos(s.word_pos);
        Rng { inner, cached: s.cached }
    }

    fn cache_take(&mut self) -> Option<f64> {
        self.cached.take()
    }

    fn cache_put(&mut self, z: f64) {
        self.cached = Some(z);
    }
}

/// Serializable RNG state (seed + stream + word position + Box-Muller spare).
#[derive(Clone, Debug, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
    pub cached: Option<f64>,
}
