//! Seeded random streams. Each consumer draws from its own stream so that
//! adding randomness in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const SPLIT: u64 = 1;
pub const INIT: u64 = 2;
pub const PAIRS: u64 = 3;
pub const MASKING: u64 = 4;
pub const SHUFFLE: u64 = 5;
pub const SYNTH: u64 = 6;
pub const SYNTH_LABELS: u64 = 7;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn stream(seed: u64, tag: u64, index: u64) -> Rng {
    let key = splitmix(splitmix(splitmix(seed) ^ tag) ^ index);
    ChaCha8Rng::seed_from_u64(key)
}
