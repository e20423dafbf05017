//! Named seed derivation.
//!
//! Every random stream in the crate is derived from a master seed plus a
//! purpose label and an index, so no global RNG exists and any parallel
//! schedule reproduces the same streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Crate-wide RNG type.
pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_label(label: &str) -> u64 {
    // FNV-1a
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Derive a child seed from `(master, purpose, index)`.
pub fn derive(master: u64, purpose: &str, index: u64) -> u64 {
    let a = splitmix64(master);
    let b = splitmix64(a ^ hash_label(purpose));
    splitmix64(b ^ splitmix64(index.wrapping_add(0x632b_e59b_d9b4_e019)))
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn derived_rng(master: u64, purpose: &str, index: u64) -> Rng {
    rng(derive(master, purpose, index))
}
