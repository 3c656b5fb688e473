//! Deterministic seed derivation so every stochastic step owns an
//! independent, reproducible stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of stream identifiers.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}

/// Stream tags, so that different consumers never share a derived seed.
pub(crate) mod stream {
    pub const INIT: u64 = 1;
    pub const LOCAL_TRAIN: u64 = 2;
    pub const PARTICIPATION: u64 = 3;
    pub const UNLEARN: u64 = 4;
    pub const RETAIN: u64 = 5;
    pub const VGAE: u64 = 6;
    pub const FEATURES: u64 = 7;
    pub const PARTITION: u64 = 8;
    pub const SYNTHETIC: u64 = 9;
}
