//! Operator kernels with forward and backward rules.

pub mod batchnorm;
pub mod conv;
pub mod linear;
pub mod pointwise;
pub mod pool;
pub mod wcm;

pub use batchnorm::{batchnorm2d, BnState, Mode};
pub use conv::{conv2d, conv2d_backward, conv3d, scale_channels, tfc2d, tfc2d_backward, ConvGrads, ConvParams, TfcGrads};
pub use linear::{linear, linear_backward};
pub use pointwise::{add, mul, pointwise, relu, sigmoid, Pointwise};
pub use pool::{global_pool, pool, PoolKind};
pub use wcm::{wcm, WcmParams};
