//! Seeded random streams.
//!
//! Every randomised routine derives its generator from `(seed, stream)` so that
//! independent consumers of one user seed never share a sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Sorted uniform subsample of `cap` indices out of `0..n`, or all indices
/// when `n <= cap`.
pub fn subsample_indices(n: usize, cap: usize, rng: &mut Rng) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut idx = rand::seq::index::sample(rng, n, cap).into_vec();
    idx.sort_unstable();
    idx
}

// Stream identifiers, one per consumer.
pub(crate) const STREAM_BANDWIDTH: u64 = 1;
pub(crate) const STREAM_MMD_GROUP: u64 = 0x100;
pub(crate) const STREAM_SPLIT: u64 = 2;
pub(crate) const STREAM_BATCH: u64 = 3;
pub(crate) const STREAM_AVG_DISTANCE: u64 = 4;
pub(crate) const STREAM_DIVERSITY: u64 = 5;
pub(crate) const STREAM_SYNTH: u64 = 0x200;
