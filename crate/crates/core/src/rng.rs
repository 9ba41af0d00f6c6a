//! Counter-based random streams.
//!
//! Every stochastic choice reads from a ChaCha stream addressed by
//! `(seed, stream id)`, so draws do not depend on the order in which pairs are
//! processed or on how many threads process them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream used to sample the initial ensemble.
pub const INIT_STREAM: u64 = 0;

const STEP_SLOT: u64 = u32::MAX as u64;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Stream for step-level choices (pair count, pair selection).
pub fn step_stream(seed: u64, step: usize) -> ChaCha8Rng {
    stream(seed, ((step as u64 + 1) << 32) | STEP_SLOT)
}

/// Stream for the per-pair draws of collision slot `slot` in `step`.
pub fn pair_stream(seed: u64, step: usize, slot: usize) -> ChaCha8Rng {
    debug_assert!((slot as u64) < STEP_SLOT);
    stream(seed, ((step as u64 + 1) << 32) | slot as u64)
}
