//! Seed derivation.
//!
//! Every random stream in the harness is a `ChaCha8Rng` seeded through
//! `SeedableRng::seed_from_u64`. Child seeds come from SplitMix64:
//!
//! ```text
//! splitmix64(z):  z += 0x9E3779B97F4A7C15
//!                 z  = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//!                 z  = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!                 z ^ (z >> 31)
//! derive_seed(base, index) = splitmix64(splitmix64(base) ^ index)
//! ```
//!
//! Run `i` of a scenario uses `derive_seed(scenario.seed, i)`, so results do not
//! depend on how runs are scheduled across threads, and adding runs never
//! changes the earlier ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base) ^ index)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream indices reserved for scenario-wide draws; run indices count up from zero.
pub(crate) const LIBRARY_STREAM: u64 = u64::MAX;
pub(crate) const SHARED_SEQUENCE_STREAM: u64 = u64::MAX - 1;

/// Per-run component streams.
pub(crate) const SEQUENCE_STREAM: u64 = 0;
pub(crate) const TRAJECTORY_STREAM: u64 = 1;
pub(crate) const NOISE_STREAM: u64 = 2;
