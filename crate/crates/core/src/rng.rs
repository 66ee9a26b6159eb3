//! Seed derivation for independent, reproducible random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a base seed with a sequence of stream coordinates
/// (purpose tag, repetition, image index, ...).
pub fn derive_seed(base: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(splitmix64(base), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn stream(base: u64, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, coords))
}

/// Purpose tags keeping derived streams disjoint.
pub mod purpose {
    pub const DROPOUT: u64 = 1;
    pub const WEIGHT_NOISE: u64 = 2;
    pub const IMAGE_NOISE: u64 = 3;
    pub const COLOCALIZATION: u64 = 4;
}
