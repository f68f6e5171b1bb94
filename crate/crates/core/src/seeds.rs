//! Independent RNG streams derived from a master seed.
//!
//! Every consumer of randomness (topology, data modes, a sensor's local
//! shuffles in a given round, ...) gets its own ChaCha stream keyed by a tag
//! and up to two indices, so results never depend on evaluation order or on
//! how work is spread across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(seed);
    for word in [tag, a, b] {
        h = splitmix64(h ^ word);
    }
    h
}

pub fn stream(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag, a, b))
}

// Stream tags.
pub const TOPOLOGY: u64 = 1;
pub const DATA: u64 = 2;
pub const INIT: u64 = 3;
pub const LOCAL_SGD: u64 = 4;
pub const MOBILITY: u64 = 5;
pub const MODES: u64 = 6;
pub const MIXTURE: u64 = 7;
pub const SAMPLES: u64 = 8;
pub const ANOMALIES: u64 = 9;
pub const CENTRAL_SGD: u64 = 10;
