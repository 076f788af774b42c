//! Deterministic seed derivation.
//!
//! Every random draw in the crate flows through a ChaCha20 generator keyed
//! by a base seed plus a label and index, so datasets and parameter
//! initializations are pure functions of their configuration. The std
//! hasher is randomized per process and must not be used here.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// FNV-1a over raw bytes. Stable across platforms and runs.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a stream label and index into a fresh seed.
pub fn derive(base: u64, label: &str, index: u64) -> u64 {
    let mut s = splitmix64(base ^ fnv1a(label.as_bytes()));
    s = splitmix64(s ^ index);
    s
}

/// ChaCha20 generator for the derived stream.
pub fn rng(base: u64, label: &str, index: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive(base, label, index))
}
