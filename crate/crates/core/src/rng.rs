//! Seeded random streams.
//!
//! Every random draw in the engine comes from a ChaCha8 stream. ChaCha is a
//! counter-based generator with a fixed, platform-independent output
//! sequence, so a given seed reproduces the same run on any machine.
//! Sub-streams (per head, per layer, per epoch) are keyed by mixing the base
//! seed with a small tuple of indices through the SplitMix64 finalizer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a sequence of indices into a new 64-bit seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut acc = splitmix64(base.wrapping_add(GOLDEN_GAMMA));
    for &p in parts {
        acc = splitmix64(acc ^ p.wrapping_add(GOLDEN_GAMMA).wrapping_mul(GOLDEN_GAMMA));
    }
    acc
}

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn substream(base: u64, parts: &[u64]) -> Stream {
    stream(derive_seed(base, parts))
}
