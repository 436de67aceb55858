//! Channel-axis reductions, channel concatenation, and the singleton-channel
//! broadcast multiply used by spatial attention.

use super::check_upstream;
use crate::{Error, Real, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceMode {
    Max,
    Mean,
}

#[derive(Clone, Debug)]
pub struct ChannelReduceCache {
    mode: ReduceMode,
    in_shape: Vec<usize>,
    /// Winning channel per (sample, voxel), max mode only.
    argmax: Vec<usize>,
}

/// Per-voxel max or mean over the channel axis: `[N,C,D,H,W] -> [N,1,D,H,W]`.
pub fn channel_reduce<T: Real>(x: &Tensor<T>, mode: ReduceMode) -> Result<(Tensor<T>, ChannelReduceCache)> {
    let [n, c, d, h, w] = x.dims5("channel_reduce input")?;
    let vol = d * h * w;
    let xs = x.data();
    let mut y = vec![T::zero(); n * vol];
    let mut argmax = Vec::new();
    match mode {
        ReduceMode::Max => {
            argmax = vec![0; n * vol];
            for ni in 0..n {
                let out = &mut y[ni * vol..][..vol];
                let arg = &mut argmax[ni * vol..][..vol];
                out.copy_from_slice(&xs[ni * c * vol..][..vol]);
                for ci in 1..c {
                    let xc = &xs[(ni * c + ci) * vol..][..vol];
                    for v in 0..vol {
                        if xc[v] > out[v] {
                            out[v] = xc[v];
                            arg[v] = ci;
                        }
                    }
                }
            }
        }
        ReduceMode::Mean => {
            let inv = T::one() / T::from_usize(c).expect("channel count");
            for ni in 0..n {
                let out = &mut y[ni * vol..][..vol];
                for ci in 0..c {
                    let xc = &xs[(ni * c + ci) * vol..][..vol];
                    out.iter_mut().zip(xc).for_each(|(o, &v)| *o = *o + v);
                }
                out.iter_mut().for_each(|o| *o = *o * inv);
            }
        }
    }
    Ok((
        Tensor::new(&[n, 1, d, h, w], y)?,
        ChannelReduceCache {
            mode,
            in_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn channel_reduce_backward<T: Real>(cache: &ChannelReduceCache, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c) = (cache.in_shape[0], cache.in_shape[1]);
    let spatial = &cache.in_shape[2..];
    let vol: usize = spatial.iter().product();
    check_upstream(dy, &[n, 1, spatial[0], spatial[1], spatial[2]], "channel_reduce")?;
    let gs = dy.data();
    let mut dx = Tensor::zeros(&cache.in_shape);
    let dxs = dx.data_mut();
    match cache.mode {
        ReduceMode::Max => {
            for ni in 0..n {
                for v in 0..vol {
                    let ci = cache.argmax[ni * vol + v];
                    dxs[(ni * c + ci) * vol + v] = gs[ni * vol + v];
                }
            }
        }
        ReduceMode::Mean => {
            let inv = T::one() / T::from_usize(c).expect("channel count");
            for ni in 0..n {
                for ci in 0..c {
                    let dst = &mut dxs[(ni * c + ci) * vol..][..vol];
                    dst.iter_mut()
                        .zip(&gs[ni * vol..][..vol])
                        .for_each(|(o, &g)| *o = g * inv);
                }
            }
        }
    }
    Ok(dx)
}

fn singleton_channel(t: &Tensor<impl Real>, what: &str) -> Result<[usize; 5]> {
    let dims = t.dims5(what)?;
    if dims[1] != 1 {
        return Err(Error::Shape(format!(
            "{what}: expected a single channel, got {} (shape {:?})",
            dims[1],
            t.shape()
        )));
    }
    Ok(dims)
}

fn same_grid(a: [usize; 5], b: [usize; 5], what: &str) -> Result<()> {
    for axis in [0, 2, 3, 4] {
        if a[axis] != b[axis] {
            return Err(Error::Shape(format!(
                "{what}: axis {axis} differs ({} vs {})",
                a[axis], b[axis]
            )));
        }
    }
    Ok(())
}

/// Stacks two single-channel maps: `[N,1,...] ++ [N,1,...] -> [N,2,...]`.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let da = singleton_channel(a, "concat_channels lhs")?;
    let db = singleton_channel(b, "concat_channels rhs")?;
    same_grid(da, db, "concat_channels")?;
    let [n, _, d, h, w] = da;
    let vol = d * h * w;
    let mut out = Vec::with_capacity(2 * n * vol);
    for ni in 0..n {
        out.extend_from_slice(&a.data()[ni * vol..][..vol]);
        out.extend_from_slice(&b.data()[ni * vol..][..vol]);
    }
    Tensor::new(&[n, 2, d, h, w], out)
}

pub fn concat_channels_backward<T: Real>(dy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let [n, c, d, h, w] = dy.dims5("concat_channels upstream")?;
    if c != 2 {
        return Err(Error::Shape(format!("concat_channels backward: expected 2 channels, got {c}")));
    }
    let vol = d * h * w;
    let mut da = Vec::with_capacity(n * vol);
    let mut db = Vec::with_capacity(n * vol);
    for ni in 0..n {
        da.extend_from_slice(&dy.data()[2 * ni * vol..][..vol]);
        db.extend_from_slice(&dy.data()[(2 * ni + 1) * vol..][..vol]);
    }
    Ok((Tensor::new(&[n, 1, d, h, w], da)?, Tensor::new(&[n, 1, d, h, w], db)?))
}

#[derive(Clone, Debug)]
pub struct MulBroadcastCache<T> {
    map: Tensor<T>,
    x: Tensor<T>,
}

/// `out[n,c,v] = map[n,0,v] · x[n,c,v]`.
pub fn mul_broadcast<T: Real>(map: &Tensor<T>, x: &Tensor<T>) -> Result<(Tensor<T>, MulBroadcastCache<T>)> {
    let dm = singleton_channel(map, "mul_broadcast map")?;
    let dx = x.dims5("mul_broadcast input")?;
    same_grid(dm, dx, "mul_broadcast")?;
    let [n, c, d, h, w] = dx;
    let vol = d * h * w;
    let mut out = x.clone();
    let os = out.data_mut();
    for ni in 0..n {
        let m = &map.data()[ni * vol..][..vol];
        for ci in 0..c {
            os[(ni * c + ci) * vol..][..vol]
                .iter_mut()
                .zip(m)
                .for_each(|(o, &mv)| *o = *o * mv);
        }
    }
    Ok((
        out,
        MulBroadcastCache {
            map: map.clone(),
            x: x.clone(),
        },
    ))
}

/// Returns `(dmap, dx)`; `dmap` sums over channels.
pub fn mul_broadcast_backward<T: Real>(
    cache: &MulBroadcastCache<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_upstream(dy, cache.x.shape(), "mul_broadcast")?;
    let [n, c, d, h, w] = cache.x.dims5("mul_broadcast cache")?;
    let vol = d * h * w;
    let (gs, xs, ms) = (dy.data(), cache.x.data(), cache.map.data());
    let mut dmap = Tensor::zeros(cache.map.shape());
    let mut dx = Tensor::zeros(cache.x.shape());
    {
        let dms = dmap.data_mut();
        let dxs = dx.data_mut();
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * vol;
                for v in 0..vol {
                    let g = gs[off + v];
                    dms[ni * vol + v] = dms[ni * vol + v] + g * xs[off + v];
                    dxs[off + v] = g * ms[ni * vol + v];
                }
            }
        }
    }
    Ok((dmap, dx))
}
