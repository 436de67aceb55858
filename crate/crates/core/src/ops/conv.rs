use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_upstream, triple_to_array, Triple};
use crate::{Error, Real, Result, Tensor};

/// Geometry of a 3D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: Triple,
    pub stride: Triple,
    pub padding: Triple,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: Triple, stride: Triple, padding: Triple) -> Self {
        Self {
            kernel,
            stride,
            padding,
            in_channels,
            out_channels,
        }
    }

    /// Stride-1 convolution that preserves spatial extent (odd cubic kernel).
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        let p = (kernel - 1) / 2;
        Self::new(in_channels, out_channels, (kernel, kernel, kernel), (1, 1, 1), (p, p, p))
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        let [kd, kh, kw] = triple_to_array(self.kernel);
        [self.out_channels, self.in_channels, kd, kh, kw]
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + self.out_channels
    }

    /// `floor((in + 2·pad − kernel)/stride) + 1` per axis.
    pub fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let k = triple_to_array(self.kernel);
        let s = triple_to_array(self.stride);
        let p = triple_to_array(self.padding);
        let mut out = [0; 3];
        for axis in 0..3 {
            if k[axis] == 0 || s[axis] == 0 {
                return Err(Error::InvalidArgument(format!(
                    "convolution kernel and stride must be positive (axis {axis})"
                )));
            }
            let padded = input[axis] + 2 * p[axis];
            if padded < k[axis] {
                return Err(Error::Shape(format!(
                    "convolution axis {axis}: padded extent {padded} is smaller than kernel {}",
                    k[axis]
                )));
            }
            out[axis] = (padded - k[axis]) / s[axis] + 1;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    input: Tensor<T>,
    weights: Tensor<T>,
    spec: ConvSpec,
    out_shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dweights: Tensor<T>,
    pub dbias: Tensor<T>,
}

/// Output index range `o` for which `o·stride + k − pad` lands in `[0, extent)`.
#[inline]
fn valid_range(extent: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // need o*stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // need o*stride + k - pad <= extent - 1
    let hi = if extent + pad > k {
        ((extent + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv3d_forward<T: Real>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let [n, cin, d, h, w] = x.dims5("conv3d input")?;
    if cin != spec.in_channels {
        return Err(Error::Shape(format!(
            "conv3d: axis 1 (channels) of input is {cin}, spec expects {}",
            spec.in_channels
        )));
    }
    let wshape = spec.weight_shape();
    if weights.shape() != wshape {
        return Err(Error::Shape(format!(
            "conv3d: weights have shape {:?}, expected {wshape:?}",
            weights.shape()
        )));
    }
    bias.expect_shape(&[spec.out_channels], "conv3d bias")?;
    let [od, oh, ow] = spec.output_extent([d, h, w])?;
    let cout = spec.out_channels;
    let [_, _, kd, kh, kw] = wshape;
    let (sd, sh, sw) = spec.stride;
    let (pd, ph, pw) = spec.padding;

    let in_vol = d * h * w;
    let out_vol = od * oh * ow;
    let xs = x.data();
    let ws = weights.data();
    let bs = bias.data();
    let mut y = vec![T::zero(); n * cout * out_vol];

    y.par_chunks_mut(out_vol).enumerate().for_each(|(idx, ych)| {
        let (ni, co) = (idx / cout, idx % cout);
        ych.iter_mut().for_each(|v| *v = bs[co]);
        for ci in 0..cin {
            let xc = &xs[(ni * cin + ci) * in_vol..][..in_vol];
            for a in 0..kd {
                let (zlo, zhi) = valid_range(d, od, a, sd, pd);
                for b in 0..kh {
                    let (ylo, yhi) = valid_range(h, oh, b, sh, ph);
                    for c in 0..kw {
                        let (xlo, xhi) = valid_range(w, ow, c, sw, pw);
                        let wv = ws[(((co * cin + ci) * kd + a) * kh + b) * kw + c];
                        for z in zlo..zhi {
                            let iz = z * sd + a - pd;
                            for yy in ylo..yhi {
                                let iy = yy * sh + b - ph;
                                let xrow = &xc[(iz * h + iy) * w..][..w];
                                let yrow = &mut ych[(z * oh + yy) * ow..][..ow];
                                for xo in xlo..xhi {
                                    yrow[xo] = yrow[xo] + wv * xrow[xo * sw + c - pw];
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    let out_shape = vec![n, cout, od, oh, ow];
    let y = Tensor::new(&out_shape, y)?;
    Ok((
        y,
        ConvCache {
            input: x.clone(),
            weights: weights.clone(),
            spec: *spec,
            out_shape,
        },
    ))
}

pub fn conv3d_backward<T: Real>(cache: &ConvCache<T>, dy: &Tensor<T>) -> Result<ConvGrads<T>> {
    check_upstream(dy, &cache.out_shape, "conv3d")?;
    let spec = &cache.spec;
    let [n, cin, d, h, w] = cache.input.dims5("conv3d cache")?;
    let [_, cout, od, oh, ow] = dy.dims5("conv3d upstream")?;
    let [_, _, kd, kh, kw] = spec.weight_shape();
    let (sd, sh, sw) = spec.stride;
    let (pd, ph, pw) = spec.padding;
    let in_vol = d * h * w;
    let out_vol = od * oh * ow;
    let xs = cache.input.data();
    let ws = cache.weights.data();
    let gs = dy.data();
    let ksize = kd * kh * kw;

    // dbias[co] = Σ_n Σ_voxels dy
    let dbias: Vec<T> = (0..cout)
        .map(|co| {
            (0..n).fold(T::zero(), |acc, ni| {
                acc + gs[(ni * cout + co) * out_vol..][..out_vol].iter().copied().sum::<T>()
            })
        })
        .collect();

    // dweights: one task per output channel.
    let mut dw = vec![T::zero(); cout * cin * ksize];
    dw.par_chunks_mut(cin * ksize).enumerate().for_each(|(co, dwc)| {
        for ni in 0..n {
            let gc = &gs[(ni * cout + co) * out_vol..][..out_vol];
            for ci in 0..cin {
                let xc = &xs[(ni * cin + ci) * in_vol..][..in_vol];
                for a in 0..kd {
                    let (zlo, zhi) = valid_range(d, od, a, sd, pd);
                    for b in 0..kh {
                        let (ylo, yhi) = valid_range(h, oh, b, sh, ph);
                        for c in 0..kw {
                            let (xlo, xhi) = valid_range(w, ow, c, sw, pw);
                            let mut acc = T::zero();
                            for z in zlo..zhi {
                                let iz = z * sd + a - pd;
                                for yy in ylo..yhi {
                                    let iy = yy * sh + b - ph;
                                    let xrow = &xc[(iz * h + iy) * w..][..w];
                                    let grow = &gc[(z * oh + yy) * ow..][..ow];
                                    for xo in xlo..xhi {
                                        acc = acc + grow[xo] * xrow[xo * sw + c - pw];
                                    }
                                }
                            }
                            let slot = &mut dwc[ci * ksize + (a * kh + b) * kw + c];
                            *slot = *slot + acc;
                        }
                    }
                }
            }
        }
    });

    // dx: one task per (sample, input channel).
    let mut dx = vec![T::zero(); n * cin * in_vol];
    dx.par_chunks_mut(in_vol).enumerate().for_each(|(idx, dxc)| {
        let (ni, ci) = (idx / cin, idx % cin);
        for co in 0..cout {
            let gc = &gs[(ni * cout + co) * out_vol..][..out_vol];
            for a in 0..kd {
                let (zlo, zhi) = valid_range(d, od, a, sd, pd);
                for b in 0..kh {
                    let (ylo, yhi) = valid_range(h, oh, b, sh, ph);
                    for c in 0..kw {
                        let (xlo, xhi) = valid_range(w, ow, c, sw, pw);
                        let wv = ws[(((co * cin + ci) * kd + a) * kh + b) * kw + c];
                        for z in zlo..zhi {
                            let iz = z * sd + a - pd;
                            for yy in ylo..yhi {
                                let iy = yy * sh + b - ph;
                                let dxrow = &mut dxc[(iz * h + iy) * w..][..w];
                                let grow = &gc[(z * oh + yy) * ow..][..ow];
                                for xo in xlo..xhi {
                                    let ix = xo * sw + c - pw;
                                    dxrow[ix] = dxrow[ix] + wv * grow[xo];
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    Ok(ConvGrads {
        dx: Tensor::new(cache.input.shape(), dx)?,
        dweights: Tensor::new(cache.weights.shape(), dw)?,
        dbias: Tensor::new(&[cout], dbias)?,
    })
}
