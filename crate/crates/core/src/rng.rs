//! Reproducible random streams.
//!
//! Every random draw in the crate goes through [`stream`], which derives an
//! independent ChaCha8 generator from `(master seed, purpose tag, index)`.
//! The master seed and tag pick the key; the index selects the ChaCha stream
//! id, so trials can be generated in any order or in parallel and still
//! produce the same numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub mod tags {
    pub const INSTANCE: &str = "instance";
    pub const DATASET: &str = "dataset";
    pub const INIT: &str = "init";
    pub const MINIBATCH: &str = "minibatch";
    pub const ORACLE: &str = "oracle";
    pub const MC_LOSS: &str = "mc-loss";
    pub const PROJECTION: &str = "projection";
    pub const LANDSCAPE: &str = "landscape";
    pub const GRADCHECK: &str = "gradcheck";
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed, e.g. a per-trial master seed.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ fnv1a(tag.as_bytes())).wrapping_add(splitmix64(index)))
}

pub fn stream(master: u64, tag: &str, index: u64) -> StreamRng {
    let key = splitmix64(master ^ fnv1a(tag.as_bytes()));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}
