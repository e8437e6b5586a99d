//! Deterministic named random streams.
//!
//! Every source of randomness in a run is a `ChaCha8` stream derived from
//! `(root seed, stream name, index)`. Re-deriving a stream from the same
//! triple yields the same draws on every platform, which is what makes
//! paired-seed ablations, reruns, and checkpoint resume bit-exact: resuming
//! at iteration `k` re-derives the iteration-`k` streams instead of having
//! to persist generator state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over arbitrary bytes. Stable across platforms and releases,
/// unlike `std::hash`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derives the named stream `(seed, name, index)`.
pub fn stream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let a = splitmix(seed ^ fnv1a(name.as_bytes()));
    let b = splitmix(a ^ index);
    let c = splitmix(b);
    let d = splitmix(c);
    key[..8].copy_from_slice(&a.to_le_bytes());
    key[8..16].copy_from_slice(&b.to_le_bytes());
    key[16..24].copy_from_slice(&c.to_le_bytes());
    key[24..].copy_from_slice(&d.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
