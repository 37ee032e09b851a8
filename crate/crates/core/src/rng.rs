//! Seed derivation. Every stochastic step draws from a `ChaCha8Rng` seeded by
//! hashing the top-level experiment seed together with a purpose tag, so one
//! number reproduces a whole run and unrelated consumers never share a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive a child seed from `seed`, a purpose tag and an index (epoch, cell, ...).
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = FNV_OFFSET;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(splitmix64(seed ^ h).wrapping_add(index))
}

pub fn rng_for(seed: u64, tag: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, tag, index))
}
