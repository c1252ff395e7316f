//! Seeded random streams.
//!
//! Every stochastic component draws from its own ChaCha stream derived from
//! the run seed, a component tag, and an index (usually the epoch), so that
//! enabling or disabling one component never shifts another's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags, one per consumer.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const IMPUTE: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const NEGATIVES: u64 = 5;
    pub const SYNTHETIC: u64 = 6;
    pub const SPLIT: u64 = 7;
}

pub fn stream(seed: u64, tag: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
