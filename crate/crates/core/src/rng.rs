//! Seeding helpers.
//!
//! Every random stream in the crate is a ChaCha8 generator. Sub-streams
//! (per trial, per sweep point, per stage) get their own seed derived from a
//! master seed with SplitMix64 mixing, so results do not depend on thread
//! scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Recorded in run manifests.
pub const RNG_ALGORITHM: &str = "ChaCha8 (rand_chacha 0.9), seeds derived with SplitMix64";

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent seed for stream `index` of stage `tag`.
pub fn derive_seed(master: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ tag) ^ index)
}

/// Stage tags used with [`derive_seed`].
pub mod stage {
    pub const SOURCE: u64 = 0x5352_4300;
    pub const DEVICE: u64 = 0x4445_5600;
    pub const NOISE: u64 = 0x4e4f_4900;
    pub const APD: u64 = 0x4150_4400;
    pub const TRIAL: u64 = 0x5452_4c00;
    pub const SWEEP: u64 = 0x5357_5000;
}
