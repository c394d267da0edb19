//! Deterministic random sampling helpers.
//!
//! All stochastic pieces of the optimizer (sparse initialization, target
//! sampling, mini-batch selection) draw from a [`Prng`] seeded explicitly, so
//! that a run is bit-reproducible given its seed.

use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math;

/// The stream cipher generator used throughout the crate.
pub type Prng = ChaCha8Rng;

/// Builds a generator from a 64-bit seed.
pub fn seeded(seed: u64) -> Prng {
    Prng::seed_from_u64(seed)
}

/// Fills `out` with independent standard-normal samples (Box-Muller).
pub fn fill_standard_normal(rng: &mut Prng, out: &mut [f64]) {
    let mut i = 0;
    while i < out.len() {
        // 1 - u lies in (0, 1], keeping the log finite.
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        let r = math::sqrt(-2.0 * math::ln(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        out[i] = r * libm::cos(theta);
        i += 1;
        if i < out.len() {
            out[i] = r * libm::sin(theta);
            i += 1;
        }
    }
}

/// Draws one standard-normal sample.
pub fn standard_normal(rng: &mut Prng) -> f64 {
    let mut buf = [0.0];
    fill_standard_normal(rng, &mut buf);
    buf[0]
}

/// Samples an index from the categorical distribution given by `probs`
/// (assumed to sum to 1 up to rounding; the tail mass goes to the last index).
pub fn sample_categorical(rng: &mut Prng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (idx, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return idx;
        }
    }
    probs.len() - 1
}

/// Returns `count` distinct indices drawn uniformly from `0..n`, in draw
/// order (partial Fisher-Yates).
pub fn sample_indices(rng: &mut Prng, n: usize, count: usize) -> Vec<usize> {
    let count = count.min(n);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}
