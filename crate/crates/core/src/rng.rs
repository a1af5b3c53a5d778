//! Seeded random streams.
//!
//! Every consumer derives its own ChaCha stream from a `(seed, stream name)`
//! pair, so runs stay reproducible regardless of call order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stable 64-bit FNV-1a hash, used to turn stream names into stream ids.
pub fn stream_id(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Independent generator for the named stream under `seed`.
pub fn stream(seed: u64, name: &str) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(name));
    rng
}

/// A child seed for the named purpose, for APIs that take a bare seed.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    stream(seed, name).next_u64()
}
