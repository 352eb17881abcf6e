//! Numeric kernels with hand-written backward passes.

pub mod conv;
pub mod dense;
pub(crate) mod linalg;
pub mod pool;
pub mod sample;

pub use conv::{conv2d, conv2d_backward, conv_output_size, Conv2dGrads, ConvWeights};
pub use dense::{
    dense, dense_backward, leaky_relu, linear, linear_backward, relu, sigmoid, Activation, DenseGrads,
    DEFAULT_LEAKY_SLOPE,
};
pub use pool::{
    channel_pool, channel_pool_backward, global_pool, global_pool_backward, pool2d, pool2d_backward,
    PoolMode,
};
pub use sample::{bilinear_sample, bilinear_sample_backward, SampleGrads};
