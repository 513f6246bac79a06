//! Deterministic, splittable random number generation.
//!
//! Every randomized quantity in this crate — constraint matrices, weight
//! initialization, fault supports, fault values, shuffles — is drawn from a
//! [`Stream`]: a ChaCha12 generator keyed by a `(seed, stream id)` pair.
//! ChaCha is counter-based, so streams with different ids are independent,
//! and the output is identical across platforms and build settings. Gaussian
//! variates use the Box–Muller transform rather than a platform `libm`
//! special function so that the exact bit pattern of every draw is
//! reproducible; results land in checkpoints and CSV files that must be
//! byte-identical across runs.

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};

/// The generator identifier recorded in checkpoints.
pub const ALGORITHM_ID: &str = "chacha12/box-muller/v1";

/// Stream ids. Consumers that might share a seed draw from distinct streams
/// so their sequences stay independent.
pub mod streams {
    pub const CONSTRAINTS: u64 = 0;
    pub const MEMORY_FAULTS: u64 = 1;
    pub const DATAPATH_FAULTS: u64 = 2;
    pub const WEIGHT_INIT: u64 = 3;
    pub const DATA_SHUFFLE: u64 = 4;
    pub const EXPERIMENT: u64 = 5;
}

/// A deterministic random stream.
pub struct Stream {
    rng: ChaCha12Rng,
    spare_normal: Option<f64>,
}

impl Stream {
    /// Stream `stream_id` of the generator keyed by `seed`. Distinct ids
    /// yield statistically independent sequences for the same seed.
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Stream { rng, spare_normal: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box–Muller. Pairs of uniforms produce pairs of
    /// normals; the second of each pair is cached and returned by the next
    /// call.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite; u2 in [0, 1).
        let u1 = 1.0 - self.unit();
        let u2 = self.unit();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        let (s, c) = theta.sin_cos();
        self.spare_normal = Some(r * s);
        r * c
    }

    /// Normal with mean 0 and standard deviation `sigma`.
    pub fn normal_scaled(&mut self, sigma: f64) -> f64 {
        sigma * self.normal()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }

    /// Uniform integer in `[0, bound)`, unbiased (Lemire's multiply-shift
    /// with rejection).
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "below(0) is undefined");
        let bound = bound as u64;
        let mut m = (self.next_u64() as u128) * (bound as u128);
        let mut lo = m as u64;
        if lo < bound {
            let threshold = bound.wrapping_neg() % bound;
            while lo < threshold {
                m = (self.next_u64() as u128) * (bound as u128);
                lo = m as u64;
            }
        }
        (m >> 64) as usize
    }

    /// `k` distinct indices drawn uniformly from `0..n` by a partial
    /// Fisher–Yates shuffle. Order is the draw order, not sorted.
    pub fn sample_distinct(&mut self, k: usize, n: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} distinct values from 0..{n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    /// In-place Fisher–Yates shuffle of a slice.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        let n = items.len();
        for i in 0..n.saturating_sub(1) {
            let j = i + self.below(n - i);
            items.swap(i, j);
        }
    }
}
