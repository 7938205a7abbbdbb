//! Seed derivation and deterministic RNG construction.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by a
//! seed derived here, so runs are reproducible bit-for-bit regardless of
//! call order elsewhere.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep independent consumers of the same run seed decorrelated.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const MASK: u64 = 2;
    pub const DATA_ORDER: u64 = 3;
    pub const SYNTH: u64 = 4;
    pub const PROBE: u64 = 5;
    pub const GRAD_CHECK: u64 = 6;
    pub const SWEEP: u64 = 7;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from (base seed, stream tag, counter).
///
/// Used for per-step, per-sample randomness so that concurrency or call
/// reordering cannot change what any consumer draws.
pub fn derive_seed(base: u64, stream_tag: u64, counter: u64) -> u64 {
    let a = splitmix64(base ^ splitmix64(stream_tag));
    splitmix64(a ^ splitmix64(counter))
}

/// Deterministic generator for a derived seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
