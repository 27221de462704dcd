//! Seeded randomness.
//!
//! Every random draw in the crate flows from a single `u64` seed through
//! ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64`), so a seed reproduces
//! the same run on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub const ALGORITHM: &str = "chacha8";

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}
