//! Seed derivation.
//!
//! Every random draw in a run comes from a `ChaCha8Rng` seeded by mixing the
//! run seed with the coordinates of the draw (step, prompt slot, purpose).
//! Nothing carries RNG state across steps, so a run resumed at step `s`
//! continues exactly as the uninterrupted run would.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `parts` into `base`. Order matters.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}

// Purpose tags so that draws for different uses never share a stream.
pub(crate) const TAG_ROLLOUT: u64 = 1;
pub(crate) const TAG_SELECT: u64 = 2;
pub(crate) const TAG_LOOKAHEAD: u64 = 3;
pub(crate) const TAG_BATCH: u64 = 4;
pub(crate) const TAG_EVAL: u64 = 5;
pub(crate) const TAG_CORPUS: u64 = 6;
