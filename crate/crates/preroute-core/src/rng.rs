//! Deterministic random number generation.
//!
//! Every stochastic component of the pipeline draws from a [`ChaCha8Rng`]
//! seeded either directly or via [`derive_seed`], so a run is reproducible
//! bit-for-bit from its root seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Root RNG for a given seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and a label,
/// so subsystems don't share or reorder each other's draws.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = fnv1a64(&base.to_le_bytes());
    h ^= fnv1a64(label.as_bytes());
    h.wrapping_mul(0x100000001b3)
}

/// FNV-1a 64-bit hash. Also used for artifact fingerprints in manifests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Standard normal sample via Box-Muller.
pub fn next_normal(rng: &mut ChaCha8Rng) -> f64 {
    // u1 in (0, 1] so the log is finite
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fills a buffer with N(0, std^2) samples.
pub fn fill_normal(rng: &mut ChaCha8Rng, std: f64, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = next_normal(rng) * std;
    }
}
