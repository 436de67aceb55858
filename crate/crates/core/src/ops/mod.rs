//! Forward/backward primitives. Every forward returns a cache that its
//! backward consumes; there is no graph.

pub mod activation;
pub mod channel;
pub mod conv;
pub mod dense;
pub mod dropout;
pub mod pool;

#[cfg(test)]
pub(crate) mod testutil;

pub use activation::{relu, relu_backward, sigmoid, sigmoid_backward, ReluCache, SigmoidCache};
pub use channel::{
    channel_reduce, channel_reduce_backward, concat_channels, concat_channels_backward,
    mul_broadcast, mul_broadcast_backward, ChannelReduceCache, MulBroadcastCache, ReduceMode,
};
pub use conv::{conv3d_backward, conv3d_forward, ConvCache, ConvGrads, ConvSpec};
pub use dense::{dense_backward, dense_forward, DenseCache, DenseGrads};
pub use dropout::{dropout, dropout_backward, DropoutCache};
pub use pool::{maxpool3d_backward, maxpool3d_forward, PoolCache, PoolSpec};

pub type Triple = (usize, usize, usize);

pub(crate) fn triple_to_array(t: Triple) -> [usize; 3] {
    [t.0, t.1, t.2]
}

/// Identifier stamped on caches so a backward can detect it was handed
/// a cache whose forward output shape disagrees with the upstream gradient.
pub(crate) fn check_upstream<T: crate::Real>(
    dy: &crate::Tensor<T>,
    expected: &[usize],
    op: &str,
) -> crate::Result<()> {
    if dy.shape() != expected {
        return Err(crate::Error::Shape(format!(
            "{op} backward: upstream gradient has shape {:?}, forward output was {expected:?}",
            dy.shape()
        )));
    }
    Ok(())
}
