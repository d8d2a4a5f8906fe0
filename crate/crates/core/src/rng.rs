//! Seed derivation. Every stochastic stage gets its own generator seeded from
//! the master seed plus a tag path, so results do not depend on call order
//! across samples or workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a master seed with a path of tags into a child seed.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(master), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_from(master: u64, tags: &[u64]) -> SeededRng {
    SeededRng::seed_from_u64(derive_seed(master, tags))
}

/// Stream tags so different stages never share a generator.
pub mod stream {
    pub const CHANNEL: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const MASK: u64 = 3;
    pub const PERTURB: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const INIT: u64 = 7;
    pub const SNR: u64 = 8;
    pub const RATIO: u64 = 9;
    pub const BATCH: u64 = 10;
    pub const VALIDATION: u64 = 11;
}
