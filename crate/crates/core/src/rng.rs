//! Seeded random streams.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`]. A run is keyed by a
//! 64-bit seed; independent consumers get their own child stream through
//! [`child`], which selects the ChaCha stream number from a fixed `(category, index)`
//! pair. The same seed therefore reproduces the same numbers on every platform,
//! and adding a consumer never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Draw categories, used as the high half of the ChaCha stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Stream {
    KinkPositions = 1,
    KinkValues = 2,
    Init = 3,
    Exploration = 4,
    Minibatch = 5,
    StartStates = 6,
    Shooting = 7,
    Split = 8,
    Sampling = 9,
}

/// Root generator for `seed`.
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Child generator for `seed`: stream id is `(category << 32) | index`.
pub fn child(seed: u64, category: Stream, index: u32) -> Rng {
    let mut rng = seeded(seed);
    rng.set_stream(((category as u64) << 32) | index as u64);
    rng
}

/// Seed for the `i`-th instance of an experiment keyed by `base`.
pub fn instance_seed(base: u64, i: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = base.wrapping_add(i.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
