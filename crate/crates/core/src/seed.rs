//! Deterministic derivation of independent random streams from one seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of stream labels.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, path))
}

/// Stream labels so unrelated consumers never share a stream.
pub mod stream {
    pub const GEOMETRY: u64 = 1;
    pub const CONTRAST: u64 = 2;
    pub const INIT: u64 = 3;
    pub const EPOCH: u64 = 4;
    pub const STEP: u64 = 5;
    pub const INFER: u64 = 6;
    pub const MASK: u64 = 7;
}
