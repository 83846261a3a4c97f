//! Seed derivation for reproducible, order-independent substreams.
//!
//! Every random draw in the crate comes from a `ChaCha8Rng` seeded through
//! [`derive_seed`], so any (run, cell) substream is a pure function of the
//! base seed and its integer coordinates, independent of scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche for key mixing.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a list of coordinates.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut acc = mix64(base);
    for &p in parts {
        acc = mix64(acc ^ p);
    }
    acc
}

/// Deterministic RNG for a derived substream.
pub fn stream_rng(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}
