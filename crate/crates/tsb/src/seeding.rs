//! Deterministic seed derivation.
//!
//! Every random decision in the toolkit draws from an rng derived solely from
//! `(master_seed, tag, index)`, so parallel and serial runs, and runs that
//! build different model subsets, consume identical random streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Mix a master seed with a purpose tag and an index into a single u64 seed.
pub fn mix_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut s = splitmix64(seed ^ fnv1a(tag.as_bytes()));
    s = splitmix64(s ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    s
}

/// Seeded rng for `(seed, tag, index)`.
pub fn rng_for(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, tag, index))
}
