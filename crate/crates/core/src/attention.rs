//! Spatial attention: a per-voxel gate in (0,1) computed from channel-pooled
//! descriptors, and the shared-parameter contract where one set of attention
//! weights serves every site in the network and receives the sum of every
//! site's gradient.

use rand::Rng;

use crate::ops::{
    channel_reduce, channel_reduce_backward, concat_channels, concat_channels_backward,
    conv3d_backward, conv3d_forward, mul_broadcast, mul_broadcast_backward, sigmoid,
    sigmoid_backward, ChannelReduceCache, ConvCache, ConvSpec, MulBroadcastCache, ReduceMode,
    SigmoidCache,
};
use crate::{Error, Real, Result, Tensor};

/// Attention parameters: a `[1, 2, k, k, k]` kernel over the
/// (channel-max, channel-mean) descriptor plus a scalar bias.
///
/// The same type carries gradients with respect to those parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedAttentionParams<T = f32> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> SharedAttentionParams<T> {
    pub fn zeros(kernel_extent: usize) -> Result<Self> {
        validate_extent(kernel_extent)?;
        let k = kernel_extent;
        Ok(Self {
            kernel: Tensor::zeros(&[1, 2, k, k, k]),
            bias: Tensor::zeros(&[1]),
        })
    }

    /// Uniform kernel in ±sqrt(6/fan_in), zero bias.
    pub fn init(kernel_extent: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::zeros(kernel_extent)?;
        let fan_in = p.kernel.len() as f64;
        let limit = (6.0 / fan_in).sqrt();
        p.kernel
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = T::from_f64_lossy(rng.random_range(-limit..limit)));
        Ok(p)
    }

    pub fn kernel_extent(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }

    pub fn conv_spec(&self) -> ConvSpec {
        ConvSpec::same(2, 1, self.kernel_extent())
    }

    pub fn cast<U: Real>(&self) -> SharedAttentionParams<U> {
        SharedAttentionParams {
            kernel: self.kernel.cast(),
            bias: self.bias.cast(),
        }
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.kernel.shape() == other.kernel.shape() && self.bias.shape() == other.bias.shape()
    }
}

/// `2·k³ + 1`.
pub fn attention_param_count(kernel_extent: usize) -> usize {
    2 * kernel_extent.pow(3) + 1
}

pub(crate) fn validate_extent(kernel_extent: usize) -> Result<()> {
    if kernel_extent == 0 || kernel_extent.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "attention kernel extent must be odd and positive, got {kernel_extent}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct AttentionSiteCache<T> {
    max_cache: ChannelReduceCache,
    mean_cache: ChannelReduceCache,
    conv_cache: ConvCache<T>,
    sigmoid_cache: SigmoidCache<T>,
    mul_cache: MulBroadcastCache<T>,
}

#[derive(Clone, Debug)]
pub struct AttentionOutput<T> {
    /// Attention map `[N,1,D,H,W]`, entries in (0,1).
    pub map: Tensor<T>,
    /// Modulated features, same shape as the site input.
    pub features: Tensor<T>,
    pub cache: AttentionSiteCache<T>,
}

pub fn attention_forward<T: Real>(x: &Tensor<T>, theta: &SharedAttentionParams<T>) -> Result<AttentionOutput<T>> {
    let (max_map, max_cache) = channel_reduce(x, ReduceMode::Max)?;
    let (mean_map, mean_cache) = channel_reduce(x, ReduceMode::Mean)?;
    let descriptor = concat_channels(&max_map, &mean_map)?;
    let (logits, conv_cache) = conv3d_forward(&descriptor, &theta.kernel, &theta.bias, &theta.conv_spec())?;
    let (map, sigmoid_cache) = sigmoid(&logits);
    let (features, mul_cache) = mul_broadcast(&map, x)?;
    Ok(AttentionOutput {
        map,
        features,
        cache: AttentionSiteCache {
            max_cache,
            mean_cache,
            conv_cache,
            sigmoid_cache,
            mul_cache,
        },
    })
}

/// Gradient of a site's input and that site's contribution to the shared
/// parameter gradient. `dx` includes both the direct modulation path and the
/// path through the attention map.
pub fn attention_backward<T: Real>(
    cache: &AttentionSiteCache<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, SharedAttentionParams<T>)> {
    let (dmap, mut dx) = mul_broadcast_backward(&cache.mul_cache, dy)?;
    let dlogits = sigmoid_backward(&cache.sigmoid_cache, &dmap)?;
    let conv = conv3d_backward(&cache.conv_cache, &dlogits)?;
    let (dmax, dmean) = concat_channels_backward(&conv.dx)?;
    dx.add_assign(&channel_reduce_backward(&cache.max_cache, &dmax)?)?;
    dx.add_assign(&channel_reduce_backward(&cache.mean_cache, &dmean)?)?;
    Ok((
        dx,
        SharedAttentionParams {
            kernel: conv.dweights,
            bias: conv.dbias,
        },
    ))
}

/// Sums per-site gradient contributions in the order given (site 1 first).
pub fn accumulate_shared_grad<T: Real>(contributions: &[SharedAttentionParams<T>]) -> Result<SharedAttentionParams<T>> {
    let (first, rest) = contributions
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("no attention gradient contributions to accumulate".into()))?;
    let mut total = first.clone();
    for c in rest {
        if !c.same_shape(&total) {
            return Err(Error::Shape(format!(
                "attention gradient contribution has kernel shape {:?}, expected {:?}",
                c.kernel.shape(),
                total.kernel.shape()
            )));
        }
        total.kernel.add_assign(&c.kernel)?;
        total.bias.add_assign(&c.bias)?;
    }
    Ok(total)
}
