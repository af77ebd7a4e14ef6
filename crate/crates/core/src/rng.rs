//! Seed derivation. Every random draw in the crate flows from an explicit seed
//! through these helpers so that runs are reproducible and independent streams
//! never overlap.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer, used to combine seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a list of indices.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

/// A ChaCha8 generator on its own stream for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids reserved for the subsystems that draw from a user seed.
pub mod streams {
    pub const CHARACTER: u64 = 1;
    pub const JITTER: u64 = 2;
    pub const PACK: u64 = 3;
    pub const SEMANTIC_ENCODER: u64 = 10;
    pub const STRUCTURE_ENCODER: u64 = 11;
    pub const INIT: u64 = 20;
    pub const SAMPLER: u64 = 30;
    pub const MIXER: u64 = 40;
    pub const SFT: u64 = 41;
    pub const GRPO: u64 = 50;
    pub const EVAL: u64 = 60;
}

/// FNV-1a hash of a string, for folding identifiers into seeds.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325_u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
