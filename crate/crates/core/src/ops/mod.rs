//! Stateless tensor kernels with hand-written backward passes.

mod conv;
mod norm;
mod pool;
mod resize;

pub use conv::{conv2d, conv2d_backward, ConvGeometry, ConvGrads};
pub use norm::{
    batch_norm_apply, batch_norm_backward, channel_stats, relu, relu_backward, BatchNormCache,
};
pub use pool::{
    avg_pool2d, avg_pool2d_backward, global_avg_pool, global_avg_pool_backward, max_pool2d,
    max_pool2d_backward,
};
pub use resize::{resize_bilinear, resize_bilinear_backward, upsample2};
