//! Deterministic RNG streams.
//!
//! Every random decision in the pipeline draws from a stream keyed by
//! `(seed, purpose, a, b)`. Streams are stateless with respect to execution
//! order: the same key always yields the same sequence, so shuffling,
//! augmentation and noise injection are reproducible regardless of batching
//! or thread scheduling, and checkpoint resume needs no RNG state beyond the
//! key components.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub const PURPOSE_INIT: u64 = 1;
pub const PURPOSE_SHUFFLE: u64 = 2;
pub const PURPOSE_AUG_WEAK: u64 = 3;
pub const PURPOSE_AUG_STRONG: u64 = 4;
pub const PURPOSE_NOISE: u64 = 5;
pub const PURPOSE_LONGTAIL: u64 = 6;
pub const PURPOSE_BLOBS: u64 = 7;
pub const PURPOSE_SUBSET: u64 = 8;

/// Derive the stream for `(seed, purpose, a, b)`.
pub fn stream(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&purpose.to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha12Rng::from_seed(key)
}
