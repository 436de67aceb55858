use super::check_upstream;
use crate::{Real, Result, Tensor};

#[derive(Clone, Debug)]
pub struct ReluCache {
    mask: Vec<bool>,
    shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SigmoidCache<T> {
    output: Tensor<T>,
}

pub fn relu<T: Real>(x: &Tensor<T>) -> (Tensor<T>, ReluCache) {
    let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
    let mask = x.data().iter().map(|&v| v > T::zero()).collect();
    (
        y,
        ReluCache {
            mask,
            shape: x.shape().to_vec(),
        },
    )
}

/// Subgradient 0 at the origin.
pub fn relu_backward<T: Real>(cache: &ReluCache, dy: &Tensor<T>) -> Result<Tensor<T>> {
    check_upstream(dy, &cache.shape, "relu")?;
    let data = dy
        .data()
        .iter()
        .zip(&cache.mask)
        .map(|(&g, &keep)| if keep { g } else { T::zero() })
        .collect();
    Tensor::new(&cache.shape, data)
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> (Tensor<T>, SigmoidCache<T>) {
    let y = x.map(sigmoid_scalar);
    (y.clone(), SigmoidCache { output: y })
}

pub fn sigmoid_backward<T: Real>(cache: &SigmoidCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    check_upstream(dy, cache.output.shape(), "sigmoid")?;
    let data = dy
        .data()
        .iter()
        .zip(cache.output.data())
        .map(|(&g, &s)| g * s * (T::one() - s))
        .collect();
    Tensor::new(cache.output.shape(), data)
}

#[inline]
fn sigmoid_scalar<T: Real>(v: T) -> T {
    // Branch on sign so exp never overflows.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
