use rayon::prelude::*;

use super::{check_upstream, Triple};
use crate::{Error, Real, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub extent: Triple,
    pub stride: Triple,
}

impl Default for PoolSpec {
    fn default() -> Self {
        Self {
            extent: (2, 2, 2),
            stride: (2, 2, 2),
        }
    }
}

impl PoolSpec {
    /// Windows that fit entirely; trailing remainder voxels are dropped.
    pub fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let k = [self.extent.0, self.extent.1, self.extent.2];
        let s = [self.stride.0, self.stride.1, self.stride.2];
        let mut out = [0; 3];
        for axis in 0..3 {
            if k[axis] == 0 || s[axis] == 0 {
                return Err(Error::InvalidArgument("pool extent and stride must be positive".into()));
            }
            if input[axis] < k[axis] {
                return Err(Error::Shape(format!(
                    "maxpool axis {axis}: spatial extent {} is smaller than pooling extent {}",
                    input[axis], k[axis]
                )));
            }
            out[axis] = (input[axis] - k[axis]) / s[axis] + 1;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct PoolCache {
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    /// Flat index into the input for every output element.
    argmax: Vec<usize>,
}

pub fn maxpool3d_forward<T: Real>(x: &Tensor<T>, spec: &PoolSpec) -> Result<(Tensor<T>, PoolCache)> {
    let [n, c, d, h, w] = x.dims5("maxpool input")?;
    let [od, oh, ow] = spec.output_extent([d, h, w])?;
    let (kd, kh, kw) = spec.extent;
    let (sd, sh, sw) = spec.stride;
    let in_vol = d * h * w;
    let out_vol = od * oh * ow;
    let xs = x.data();

    let mut y = vec![T::zero(); n * c * out_vol];
    let mut arg = vec![0usize; n * c * out_vol];
    y.par_chunks_mut(out_vol)
        .zip(arg.par_chunks_mut(out_vol))
        .enumerate()
        .for_each(|(plane, (ych, ach))| {
            let base = plane * in_vol;
            let xc = &xs[base..][..in_vol];
            let mut o = 0;
            for z in 0..od {
                for yy in 0..oh {
                    for xo in 0..ow {
                        // Scanning in flat order and replacing only on strict
                        // increase keeps the lowest flat index among ties.
                        let mut best = None::<(usize, T)>;
                        for a in 0..kd {
                            for b in 0..kh {
                                let row = ((z * sd + a) * h + yy * sh + b) * w + xo * sw;
                                for cc in 0..kw {
                                    let v = xc[row + cc];
                                    if best.is_none_or(|(_, bv)| v > bv) {
                                        best = Some((row + cc, v));
                                    }
                                }
                            }
                        }
                        let (i, v) = best.expect("non-empty window");
                        ych[o] = v;
                        ach[o] = base + i;
                        o += 1;
                    }
                }
            }
        });

    let out_shape = vec![n, c, od, oh, ow];
    Ok((
        Tensor::new(&out_shape, y)?,
        PoolCache {
            in_shape: x.shape().to_vec(),
            out_shape,
            argmax: arg,
        },
    ))
}

pub fn maxpool3d_backward<T: Real>(cache: &PoolCache, dy: &Tensor<T>) -> Result<Tensor<T>> {
    check_upstream(dy, &cache.out_shape, "maxpool3d")?;
    let mut dx = Tensor::zeros(&cache.in_shape);
    let dxs = dx.data_mut();
    for (&i, &g) in cache.argmax.iter().zip(dy.data()) {
        dxs[i] = dxs[i] + g;
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::testutil::{check_grad, rand_tensor};

    #[test]
    fn halves_with_floor() {
        let spec = PoolSpec::default();
        assert_eq!(spec.output_extent([92, 110, 92]).unwrap(), [46, 55, 46]);
        assert_eq!(spec.output_extent([3, 3, 3]).unwrap(), [1, 1, 1]);
        assert!(spec.output_extent([1, 4, 4]).is_err());
    }

    #[test]
    fn picks_pair_maxima() {
        let spec = PoolSpec {
            extent: (1, 1, 2),
            stride: (1, 1, 2),
        };
        let x = Tensor::<f32>::new(&[1, 1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = maxpool3d_forward(&x, &spec).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_input_routes_to_first_element() {
        let x = Tensor::<f32>::full(&[1, 1, 4, 4, 4], 3.0);
        let (y, cache) = maxpool3d_forward(&x, &PoolSpec::default()).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
        let dx = maxpool3d_backward(&cache, &Tensor::<f32>::ones(y.shape())).unwrap();
        for z in 0..4 {
            for yy in 0..4 {
                for xx in 0..4 {
                    let first = z % 2 == 0 && yy % 2 == 0 && xx % 2 == 0;
                    assert_eq!(dx.data()[(z * 4 + yy) * 4 + xx], if first { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn one_unit_per_window_for_distinct_maxima() {
        let x = rand_tensor(&[2, 2, 4, 4, 5], 3);
        let (y, cache) = maxpool3d_forward(&x, &PoolSpec::default()).unwrap();
        let dx = maxpool3d_backward(&cache, &Tensor::<f64>::ones(y.shape())).unwrap();
        assert_eq!(dx.sum(), y.len() as f64);
        assert!(dx.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let dz = maxpool3d_backward(&cache, &Tensor::<f64>::zeros(y.shape())).unwrap();
        assert_eq!(dz.max_abs(), 0.0);
        assert!(maxpool3d_backward(&cache, &Tensor::<f64>::zeros(&[1])).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = rand_tensor(&[1, 2, 4, 4, 4], 9);
        let (y, cache) = maxpool3d_forward(&x, &PoolSpec::default()).unwrap();
        let r = rand_tensor(y.shape(), 10);
        let dx = maxpool3d_backward(&cache, &r).unwrap();
        check_grad(&x, &dx, 1e-3, 1e-4, |p| {
            let (y, _) = maxpool3d_forward(p, &PoolSpec::default()).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        });
    }
}
