//! Counter-based random substreams.
//!
//! Every stochastic component draws from a generator keyed by a master seed
//! plus a path of integer labels (tree index, replicate index, attempt, ...).
//! Results therefore do not depend on scheduling or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a label path.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(mix64(seed), |acc, &l| mix64(acc ^ mix64(l.wrapping_add(0x632B_E59B_D9B4_E019))))
}

pub fn substream(seed: u64, labels: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, labels))
}

/// Uniform draw in [0, 1) that depends only on `(seed, key)`.
#[inline]
pub fn keyed_uniform(seed: u64, key: u64) -> f64 {
    (mix64(seed ^ mix64(key)) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Poisson(1) count keyed by `(seed, key)`, by CDF inversion.
pub fn keyed_poisson1(seed: u64, key: u64) -> u32 {
    let u = keyed_uniform(seed, key);
    let mut p = (-1.0f64).exp();
    let mut cdf = p;
    let mut k = 0u32;
    while u >= cdf && k < 20 {
        k += 1;
        p /= k as f64;
        cdf += p;
    }
    k
}
