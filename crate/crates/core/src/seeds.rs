//! Deterministic seed derivation.
//!
//! Every stochastic component (init, batch sampling, edge dropout, message
//! dropout, synthetic data) draws from a ChaCha stream seeded by mixing a
//! base seed with a purpose tag and optional indices, so independent
//! components never share a stream and runs are reproducible across
//! platforms and thread counts.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche for combining seed material.
fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// FNV-1a over the tag bytes.
fn tag_hash(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Mix a base seed with a purpose tag and indices into a derived seed.
pub fn derive(base: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut s = splitmix(base ^ tag_hash(tag));
    for &ix in indices {
        s = splitmix(s ^ ix);
    }
    s
}

/// ChaCha stream for a derived seed.
pub fn rng(base: u64, tag: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, tag, indices))
}
