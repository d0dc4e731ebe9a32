//! Seeded random streams. ChaCha8 keeps draws identical across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Shape, Tensor};

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent child seed for the `index`-th sub-run of `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Entries drawn uniformly from `[-bound, bound)`.
pub fn uniform_tensor(rng: &mut SeededRng, shape: Shape, bound: f64) -> Tensor {
    if bound == 0.0 {
        return Tensor::zeros(shape);
    }
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-bound..bound))
}

/// Entries drawn from a standard normal.
pub fn normal_tensor(rng: &mut SeededRng, shape: Shape) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| StandardNormal.sample(rng))
}

pub fn standard_normal(rng: &mut SeededRng) -> f64 {
    StandardNormal.sample(rng)
}
