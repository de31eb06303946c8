//! Layers around the fern backbone: normalization, activations, pooling and
//! the convolution baselines.

mod batchnorm;
mod conv;
mod pool;

pub use batchnorm::{BatchNorm, NormMode, DEFAULT_EPSILON, DEFAULT_MOMENTUM};
pub use conv::{binary_conv2d, conv2d, BinaryConv2d, Conv2d, ConvGeometry};
pub use pool::{adaptive_avg_pool, relu};
