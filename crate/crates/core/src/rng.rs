//! Seeded randomness helpers. Every stochastic component derives its stream
//! from an explicit u64 seed so reruns are bit-reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

pub fn seeded(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Independent substream `index` of a base seed.
pub fn substream(seed: u64, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Standard normal via Box-Muller.
pub fn standard_normal(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
