//! Deterministic RNG stream derivation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent seed for `(base, stream, index)`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    mix64(mix64(base ^ mix64(stream)) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn stream(base: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, index))
}

/// Stream tags, kept in one place so that two consumers never share one.
pub mod tag {
    pub const TEXTURE: u64 = 1;
    pub const PATH: u64 = 2;
    pub const HEIGHT: u64 = 3;
    pub const ELECTRONICS: u64 = 4;
    pub const GYRO: u64 = 5;
    pub const SCENARIO: u64 = 6;
    pub const SPLIT: u64 = 7;
}
