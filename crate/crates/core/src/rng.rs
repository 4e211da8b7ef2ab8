//! Seeding and substream discipline.
//!
//! Every stochastic component of the crate draws from a [`StreamRng`]
//! (ChaCha8: seedable, portable, identical output on every platform). Seeds
//! are derived from a root seed with the SplitMix64 finalizer so that any
//! substream — a replicate, a sampled window, a dropout mask — can be
//! reproduced in isolation:
//!
//! ```text
//! seed(path) = fold(splitmix64(root), |s, component| splitmix64(s ^ component))
//! ```

use rand::Rng;
use rand_distr::StandardNormal;

/// The crate-wide pseudorandom generator.
pub type StreamRng = rand_chacha::ChaCha8Rng;

/// Seed-path component for replicate expansion in experiment runs.
pub const TAG_REPLICATE: u64 = 0x5245504c49434154; // "REPLICAT"
/// Seed-path component for parameter initialization.
pub const TAG_INIT: u64 = 0x494e495420202020; // "INIT    "
/// Seed-path component for the training-window sampler.
pub const TAG_SAMPLER: u64 = 0x53414d504c455220; // "SAMPLER "
/// Seed-path component for dropout masks.
pub const TAG_DROPOUT: u64 = 0x44524f504f555420; // "DROPOUT "
/// Seed-path component for observation noise in the synthetic generator.
pub const TAG_NOISE: u64 = 0x4e4f495345202020; // "NOISE   "

/// SplitMix64 finalizer (Steele, Lea & Flood 2014).
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed for a named substream. Order of path components matters.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    let mut state = splitmix64(root);
    for &component in path {
        state = splitmix64(state ^ component);
    }
    state
}

/// Seed for replicate `k` of a run with the given master seed.
pub fn replicate_seed(master: u64, k: u64) -> u64 {
    derive_seed(master, &[TAG_REPLICATE, k])
}

/// Builds the generator for a derived substream.
pub fn stream(root: u64, path: &[u64]) -> StreamRng {
    use rand::SeedableRng;
    StreamRng::seed_from_u64(derive_seed(root, path))
}

/// Standard normal draw.
pub fn normal(rng: &mut StreamRng) -> f64 {
    rng.sample(StandardNormal)
}

/// Normal draw truncated to two standard deviations, then scaled.
pub fn truncated_normal(rng: &mut StreamRng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}
