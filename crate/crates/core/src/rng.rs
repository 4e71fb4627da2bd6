//! Deterministic RNG plumbing.
//!
//! A single master seed is split hierarchically into independent streams so
//! that per-image or per-epoch work can be reordered (or parallelized) without
//! changing any drawn value.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step; used to mix labels into derived seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `seed` and a list of labels.
///
/// `derive_seed(s, &[a, b])` differs from `derive_seed(s, &[b, a])`, so the
/// label path acts as a namespace.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    let mut state = splitmix64(seed ^ 0x5851_f42d_4c95_7f2d);
    for &label in labels {
        state = splitmix64(state ^ splitmix64(label));
    }
    state
}

/// A seeded stream for one labelled task.
pub fn stream(seed: u64, labels: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, labels))
}

/// Stable numeric labels for the RNG tree.
pub mod labels {
    pub const INIT: u64 = 1;
    pub const CROPS: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const DATA: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const GRADCHECK: u64 = 7;
    pub const THEORY: u64 = 8;
    pub const NOISE: u64 = 9;
    pub const POSITIVE: u64 = 10;
}

/// Draw from a normal truncated to ±2 standard deviations (resampling).
///
/// Sampling happens in f64 so f32 and f64 models share the same underlying
/// parameter draws.
pub fn truncated_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        // Box-Muller on two uniforms keeps the dependency surface small here.
        let u1: f64 = rng.random::<f64>().max(1e-300);
        let u2: f64 = rng.random::<f64>();
        let n = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if n.abs() <= 2.0 {
            return n * std;
        }
    }
}
