use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::check_upstream;
use crate::{Error, Real, Result, Tensor};

#[derive(Clone, Debug)]
pub struct DropoutCache<T> {
    /// Per-element multiplier: 0 or 1/(1−rate). `None` when the op was an identity.
    scale: Option<Vec<T>>,
    shape: Vec<usize>,
}

/// Inverted dropout. The mask depends only on `(seed, counter)`; with
/// `training == false` or `rate == 0` the op is the identity.
pub fn dropout<T: Real>(
    x: &Tensor<T>,
    rate: f64,
    seed: u64,
    counter: u64,
    training: bool,
) -> Result<(Tensor<T>, DropoutCache<T>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    let shape = x.shape().to_vec();
    if !training || rate == 0.0 {
        return Ok((x.clone(), DropoutCache { scale: None, shape }));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(counter);
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    let scale: Vec<T> = (0..x.len())
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let data = x.data().iter().zip(&scale).map(|(&v, &s)| v * s).collect();
    Ok((Tensor::new(&shape, data)?, DropoutCache { scale: Some(scale), shape }))
}

pub fn dropout_backward<T: Real>(cache: &DropoutCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    check_upstream(dy, &cache.shape, "dropout")?;
    match &cache.scale {
        None => Ok(dy.clone()),
        Some(scale) => {
            let data = dy.data().iter().zip(scale).map(|(&g, &s)| g * s).collect();
            Tensor::new(&cache.shape, data)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::testutil::rand_tensor;

    #[test]
    fn identity_cases() {
        let x = rand_tensor(&[4, 5], 1);
        assert_eq!(dropout(&x, 0.0, 1, 0, true).unwrap().0, x);
        assert_eq!(dropout(&x, 0.9, 1, 0, false).unwrap().0, x);
        assert!(dropout(&x, 1.0, 1, 0, true).is_err());
    }

    #[test]
    fn law_of_large_numbers() {
        let n = 100_000;
        let x = Tensor::<f64>::from_fn(&[n], |i| 1.0 + (i % 7) as f64);
        let (y, _) = dropout(&x, 0.5, 42, 3, true).unwrap();
        let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        assert!((kept - 0.5).abs() < 0.01, "kept fraction {kept}");
        let (mx, my) = (x.sum() / n as f64, y.sum() / n as f64);
        assert!(((my - mx) / mx).abs() < 0.02, "{mx} vs {my}");
    }

    #[test]
    fn mask_is_pure_in_seed_and_counter() {
        let x = rand_tensor(&[64], 2);
        let a = dropout(&x, 0.3, 7, 1, true).unwrap().0;
        assert_eq!(a, dropout(&x, 0.3, 7, 1, true).unwrap().0);
        assert_ne!(a, dropout(&x, 0.3, 7, 2, true).unwrap().0);
        assert_ne!(a, dropout(&x, 0.3, 8, 1, true).unwrap().0);
    }

    #[test]
    fn backward_applies_same_mask() {
        let x = rand_tensor(&[32], 3);
        let (y, cache) = dropout(&x, 0.4, 5, 0, true).unwrap();
        let g = dropout_backward(&cache, &Tensor::ones(&[32])).unwrap();
        for ((&xv, &yv), &gv) in x.data().iter().zip(y.data()).zip(g.data()) {
            assert!((yv - xv * gv).abs() < 1e-12);
        }
    }
}
