//! Reproducible random streams.
//!
//! Every random draw in the library goes through [`ChaCha8Rng`], a
//! counter-based generator with 2^64 independent streams per seed. A run is
//! fully determined by its 64-bit master seed:
//!
//! ```text
//!   rep_seed(master, i) = splitmix64(master ^ splitmix64(i + 1))
//!   stream(rep_seed, s) = ChaCha8Rng::seed_from_u64(rep_seed) with set_stream(s)
//! ```
//!
//! Each consumer (reward vector, contexts, feedback, network init, policy
//! sampling) owns its own [`Stream`], so adding or removing draws in one of
//! them never shifts any other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The concrete generator used throughout the crate.
pub type Rng = ChaCha8Rng;

/// Named stream identifiers within one repetition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    RewardVector = 1,
    Contexts = 2,
    Feedback = 3,
    NetworkInit = 4,
    Policy = 5,
    Diagnostics = 6,
}

/// SplitMix64 finalizer (Steele, Lea, Flood 2014).
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of repetition `rep` under master seed `master`.
pub fn repetition_seed(master: u64, rep: usize) -> u64 {
    splitmix64(master ^ splitmix64(rep as u64 + 1))
}

/// A generator for one named stream of one repetition.
pub fn stream(rep_seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(rep_seed);
    rng.set_stream(which as u64);
    rng
}

/// A generator seeded directly, for tests and one-off tools.
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
