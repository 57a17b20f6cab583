//! Independent deterministic random streams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const INIT: u64 = 1;
pub const SPLIT: u64 = 2;
pub const UNKNOWN: u64 = 3;
pub const SILENCE: u64 = 4;
pub const SYNTH: u64 = 5;
pub const EPOCH: u64 = 6;
pub const PATHS: u64 = 7;
pub const ARCH: u64 = 8;

/// Stream `index` of purpose `tag` under `seed`.
pub fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 48) ^ index);
    rng
}
