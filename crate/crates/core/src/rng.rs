//! Seed plumbing. Every stochastic decision in the pipeline draws from a
//! `ChaCha8Rng` whose 64-bit seed is derived with [`mix`] from a run seed and
//! a small tuple of integers naming the decision.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 step: adds the golden-ratio increment and applies the
/// finalizer. Bit-exact contract used by the artifact format.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into `base`: `h = splitmix64(base)`, then
/// `h = splitmix64(h ^ p)` for each part.
pub fn mix(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |h, &p| splitmix64(h ^ p))
}

/// Seed of the `index`-th generation record of `class_id`.
pub fn record_seed(base_seed: u64, class_id: u32, index: u64) -> u64 {
    mix(base_seed, &[class_id as u64, index])
}

pub fn rng_for(base: u64, parts: &[u64]) -> Rng {
    Rng::seed_from_u64(mix(base, parts))
}

// Stream tags so independent stages never share a stream.
pub mod stream {
    pub const PATCH: u64 = 0x5041_5443;
    pub const COLLAGE: u64 = 0x434f_4c4c;
    pub const INVERT: u64 = 0x494e_5654;
    pub const INIT: u64 = 0x494e_4954;
    pub const BACKEND: u64 = 0x4241_434b;
    pub const STUDENT: u64 = 0x5354_5544;
    pub const TEACHER: u64 = 0x5445_4143;
    pub const DATA: u64 = 0x4441_5441;
}
