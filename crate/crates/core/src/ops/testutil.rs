use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Tensor;

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Relative error with a floor on the denominator so exact zeros compare cleanly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central-difference check of `analytic` against `f` perturbed around `at`.
pub fn check_grad(
    at: &Tensor<f64>,
    analytic: &Tensor<f64>,
    eps: f64,
    tol: f64,
    f: impl Fn(&Tensor<f64>) -> f64,
) {
    assert_eq!(at.shape(), analytic.shape());
    let mut p = at.clone();
    for i in 0..at.len() {
        let orig = p.data()[i];
        p.data_mut()[i] = orig + eps;
        let up = f(&p);
        p.data_mut()[i] = orig - eps;
        let down = f(&p);
        p.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        assert!(
            rel_err(a, numeric) < tol,
            "entry {i}: analytic {a} vs numeric {numeric}"
        );
    }
}
