//! Seeded, counter-addressable random streams.
//!
//! Every random quantity in the crate is drawn from a [`ChaCha8Rng`] whose
//! seed is derived from `(seed, stream, index)`, so results do not depend
//! on generation order or on the `rand` version's default RNG.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

/// Stream tags keep independent consumers of one run seed apart.
pub mod stream {
    pub const WORLD: u64 = 1;
    pub const INIT: u64 = 2;
    pub const PRETRAIN_DATA: u64 = 3;
    pub const TRAIN_DATA: u64 = 4;
    pub const VAL_DATA: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const DELTA: u64 = 7;
    pub const HEAD_INIT: u64 = 8;
    pub const PROBE_DATA: u64 = 9;
    pub const PRETRAIN_VAL: u64 = 10;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derive(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    seeded(derive_seed(seed, stream, index))
}
