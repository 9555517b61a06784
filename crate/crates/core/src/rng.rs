//! Counter-based, splittable random streams.
//!
//! Every stream is a ChaCha8 keystream whose key is derived from a
//! `(seed, id)` pair and whose stream number selects a [`Purpose`]. Because
//! ChaCha is a counter-mode cipher, two streams never share state, so a
//! block's randomness depends only on its identity and not on the order in
//! which a worker happens to visit the tree.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random stream type handed to samplers and characteristics.
pub type StreamRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and an index.
#[inline]
pub fn split_seed(seed: u64, index: u64) -> u64 {
    mix64(seed ^ mix64(index.wrapping_add(GOLDEN)).rotate_left(17))
}

/// Separate sub-streams of one key. Waiting times and split shapes live on
/// different sub-streams so that changing the self-similarity index only
/// changes the clock, never the genealogy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Clock = 0,
    Split = 1,
    Characteristic = 2,
    Tagged = 3,
    Bootstrap = 4,
    Sampling = 5,
}

/// Opens the stream for `(seed, id)` with the given purpose.
pub fn stream(seed: u64, id: u64, purpose: Purpose) -> StreamRng {
    let base = split_seed(seed, id);
    let mut key = [0u8; 32];
    let mut state = base;
    for chunk in key.chunks_exact_mut(8) {
        state = state.wrapping_add(GOLDEN);
        chunk.copy_from_slice(&mix64(state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(purpose as u64);
    rng
}
