//! Seed handling.
//!
//! All randomness in the pipeline flows from a single 64-bit seed through
//! named substreams ("data", "noise", "permutation", "mask", ...), so each
//! component is independently reproducible: re-running one stage with the
//! same seed draws the same values no matter what the other stages consumed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Stable 64-bit FNV-1a. Stdlib hashers are not stable across releases, and
/// substream derivation must never change between builds.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive the seed of a named substream.
pub fn substream_seed(seed: u64, name: &str) -> u64 {
    fnv1a(name.as_bytes()) ^ seed.rotate_left(17)
}

/// RNG for a named substream of `seed`.
pub fn substream(seed: u64, name: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(substream_seed(seed, name))
}

/// RNG for the `index`-th element of a named substream, e.g. one sampling
/// trajectory or one synthetic customer.
pub fn substream_indexed(seed: u64, name: &str, index: u64) -> ChaCha12Rng {
    let base = substream_seed(seed, name);
    ChaCha12Rng::seed_from_u64(base ^ (index.wrapping_mul(0x9e37_79b9_7f4a_7c15)).rotate_left(31))
}
