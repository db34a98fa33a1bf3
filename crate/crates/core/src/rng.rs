//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha8 stream derived from
//! the experiment seed, so changing how many numbers one component consumes
//! never shifts the draws seen by another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Gaussian sampler used throughout; echoed into run manifests.
pub const GAUSSIAN_SAMPLER: &str = "ziggurat (rand_distr::StandardNormal)";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Momentum = 1,
    StepJitter = 2,
    Acceptance = 3,
    ObservationNoise = 4,
    Background = 5,
    EnsembleInit = 6,
    ObservationPerturbation = 7,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Derives an independent seed for the `index`-th sub-run (window, replicate).
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| standard_normal(rng)).collect()
}
