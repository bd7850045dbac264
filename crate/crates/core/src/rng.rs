//! Seeded random streams.
//!
//! A master seed is split into independent ChaCha streams addressed by
//! `(domain, index)`, so record `i` of a dataset, or restart `r` of a training
//! run, can be regenerated without touching any other stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Well-separated domain tags for the streams used in this crate.
pub mod domain {
    pub const DATASET_TRAIN: u64 = 1;
    pub const DATASET_VAL: u64 = 2;
    pub const DATASET_TEST: u64 = 3;
    pub const RESTART: u64 = 10;
    pub const BOOTSTRAP: u64 = 20;
    pub const GENERIC: u64 = 99;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent stream `index` of `domain` under `master`.
pub fn stream(master: u64, domain: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(master ^ splitmix64(domain)));
    rng.set_stream(index);
    rng
}

/// A single stream for ad-hoc use (tests, examples).
pub fn seeded(seed: u64) -> Rng {
    stream(seed, domain::GENERIC, 0)
}
