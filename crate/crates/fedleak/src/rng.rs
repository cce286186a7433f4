//! Deterministic randomness helpers.
//!
//! Two flavors are used throughout the crate:
//!
//! * sequential streams ([`stream`]) — a ChaCha8 generator derived from a
//!   root seed plus a list of context words, so per-client/per-round streams
//!   are independent of execution order;
//! * counter-based draws ([`unit_uniform`], [`standard_normal`]) — a pure
//!   function of (seed, index), which makes per-scalar decisions reproducible
//!   under any parallel schedule.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, cheap, stable across platforms.
#[inline]
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combine a root seed with context words into one derived seed.
pub fn derive(seed: u64, context: &[u64]) -> u64 {
    let mut acc = mix(seed ^ 0x6a09_e667_f3bc_c908);
    for &w in context {
        acc = mix(acc ^ w);
    }
    acc
}

/// Sequential generator keyed by (seed, context...).
pub fn stream(seed: u64, context: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, context))
}

/// Uniform draw in [0, 1) as a pure function of (seed, index).
#[inline]
pub fn unit_uniform(seed: u64, index: u64) -> f64 {
    // 53 high bits -> exact dyadic rational in [0,1)
    let bits = mix(mix(seed ^ 0x517c_c1b7_2722_0a95) ^ index);
    (bits >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

/// Standard normal draw as a pure function of (seed, index), via Box-Muller.
#[inline]
pub fn standard_normal(seed: u64, index: u64) -> f64 {
    let u1 = 1.0 - unit_uniform(seed, index.wrapping_mul(2)); // (0, 1]
    let u2 = unit_uniform(seed, index.wrapping_mul(2).wrapping_add(1));
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
