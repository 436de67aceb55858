//! Volumetric age regression with a weight-shared spatial-attention 3D CNN.
//!
//! The crate is organized bottom-up:
//! - [`tensor`] and [`ops`]: dense tensors and hand-written forward/backward
//!   kernels (convolution, pooling, activations, dropout, channel ops);
//! - [`attention`]: the spatial attention site and shared-parameter gradient
//!   accumulation;
//! - [`model`]: architecture config, shape trace, build, forward, backward;
//! - [`training`]: losses, Adam, metrics, splits, and experiment protocols;
//! - [`data`]: NIfTI-1 and raw readers, manifests, synthetic phantoms;
//! - [`interpret`]: Grad-CAM and slice export;
//! - [`checkpoint`]: the binary model container.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod interpret;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{AttentionMode, BrainAgeModel, ModelConfig};
pub use tensor::{Real, Tensor};
