use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Shape, Tensor};

/// Zero-mean Gaussian weights with standard deviation `sqrt(2 / fan_in)`.
pub fn he_init(shape: Shape, fan_in: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros(shape);
    he_normal_fill(&mut t, fan_in, &mut rng);
    t
}

/// Overwrite `t` with He-normal samples drawn from `rng`.
pub fn he_normal_fill<R: Rng + ?Sized>(t: &mut Tensor, fan_in: usize, rng: &mut R) {
    assert!(fan_in > 0, "fan_in must be positive");
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    t.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
}
