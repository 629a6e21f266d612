//! Shared fixtures for the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use uterodiff::nn::Tensor;

/// `n` standard-normal tensors of `shape`, reproducible from `seed`.
pub fn normal_tensors(n: usize, shape: &[usize], seed: u64) -> Vec<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len: usize = shape.iter().product();
    (0..n).map(|_| Tensor::new(shape.to_vec(), (0..len).map(|_| StandardNormal.sample(&mut rng)).collect())).collect()
}

/// `n` standard-normal vectors of length `d`.
pub fn normal_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
}
