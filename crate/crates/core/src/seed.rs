//! Seed splitting. Every random stream is derived from one run seed plus a
//! path of stage tags, so streams never depend on the order they are drawn.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng_for(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}

/// Stage tags.
pub mod stage {
    pub const TEACHER: u64 = 1;
    pub const CALIBRATION: u64 = 2;
    pub const SEARCH_INIT: u64 = 3;
    pub const SEARCH_VARIATION: u64 = 4;
    pub const SEARCH_NOISE: u64 = 5;
    pub const TRAIN_SHUFFLE: u64 = 6;
    pub const DATA: u64 = 7;
}
