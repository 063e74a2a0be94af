//! Layer vocabulary: convolutions, normalization, activations, pooling,
//! squeeze-and-excitation and resampling.

pub mod conv;
pub mod elementwise;
mod gemm;
pub mod norm;
pub mod pool;
pub mod se;
pub mod upsample;

pub use conv::{branch_specs, conv2d_direct, conv2d_fast, multi_dilation_group_conv, ConvSpec};
pub use elementwise::{add, relu, sigmoid};
pub use norm::{batchnorm_infer, fold_batchnorm, BatchNormParams};
pub use pool::{avgpool2x2, global_avg_pool};
pub use se::{se_block, se_width};
pub use upsample::{bilinear_resize, bilinear_upsample};
