//! Seed derivation. Every stochastic component draws from a ChaCha stream
//! keyed by a mix of the run seed and stable identifiers, so results do not
//! depend on iteration or thread order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Mix a base seed with a sequence of integer keys.
pub fn derive(seed: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// Mix a base seed with a string identifier and integer keys.
pub fn derive_str(seed: u64, id: &str, keys: &[u64]) -> u64 {
    let base = derive(seed, &[fnv1a(id)]);
    derive(base, keys)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Named streams so that unrelated consumers of the same run seed never share
/// a stream.
pub mod stream {
    pub const CORPUS: u64 = 1;
    pub const STUDY: u64 = 2;
    pub const SAMPLING: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const INIT: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const ENCODER: u64 = 7;
    pub const MI: u64 = 8;
    pub const GOLDEN: u64 = 9;
    pub const SUBJECTS: u64 = 10;
    pub const GRADCHECK: u64 = 11;
}
