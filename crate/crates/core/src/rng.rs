//! Seeded random number generation.
//!
//! Two kinds of generators are used. Sequential consumers (MCMC chains, data
//! generators) use plain `ChaCha12Rng` instances keyed by a 64-bit seed.
//! Sketching matrices instead need *counter addressing*: entry `(i, j)` of an
//! `m x n` matrix must be reproducible from `(seed, i*n + j)` alone, so that a
//! research center holding columns `[offset, offset + n_j)` can regenerate
//! exactly its block of the global matrix. [`CounterRng`] provides that by
//! seeking the ChaCha keystream: counter `c` consumes the two 32-bit words at
//! position `2c`, and the variate is the standard-normal quantile of the
//! resulting uniform. One counter always maps to one variate, so blocks can be
//! generated independently and bit-identically in any order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use statrs::function::erf::erf_inv;

/// Stream id for sketching-matrix entries.
pub const STREAM_SKETCH: u64 = 1;

/// Counter-addressable stream of standard normal variates.
#[derive(Clone, Debug)]
pub struct CounterRng {
    template: ChaCha12Rng,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut template = ChaCha12Rng::seed_from_u64(seed);
        template.set_stream(stream);
        CounterRng { template }
    }

    /// The standard normal variate at a single counter position.
    pub fn normal_at(&self, counter: u64) -> f64 {
        let mut out = [0.0];
        self.fill_normals(counter, &mut out);
        out[0]
    }

    /// Fills `out` with the variates at counters `start, start+1, ...`.
    pub fn fill_normals(&self, start: u64, out: &mut [f64]) {
        let mut rng = self.template.clone();
        rng.set_word_pos(2 * u128::from(start));
        for slot in out.iter_mut() {
            *slot = u64_to_standard_normal(rng.random::<u64>());
        }
    }
}

/// Maps a raw 64-bit word to N(0, 1) through the inverse CDF.
///
/// The uniform is taken strictly inside (0, 1): the top 53 bits are centered
/// on half-ulp offsets, so the quantile is always finite.
fn u64_to_standard_normal(x: u64) -> f64 {
    let u = ((x >> 11) as f64 + 0.5) * 2f64.powi(-53);
    std::f64::consts::SQRT_2 * erf_inv(2.0 * u - 1.0)
}

/// A sequential generator for one logical component of the pipeline.
///
/// `stream` separates independent uses that share a base seed.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
