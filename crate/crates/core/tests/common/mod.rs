#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenemixer::Tensor;

pub mod counted;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_vec(dims, data).unwrap()
}

/// Largest elementwise relative error, with the denominator floored at 1e-3
/// so that entries that are zero up to rounding do not dominate.
pub fn max_rel_err(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    assert_eq!(analytic.dims(), numeric.dims());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

/// `sum(y * probe)`: a scalar objective whose gradient w.r.t. `y` is `probe`.
pub fn dot(y: &Tensor<f64>, probe: &Tensor<f64>) -> f64 {
    y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
}
