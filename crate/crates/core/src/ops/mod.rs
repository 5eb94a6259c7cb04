//! Forward kernels and their hand-written backward passes.
//!
//! Every network execution path (plain inference, traced inference for
//! relevance propagation, recorded autodiff) calls these same kernels, so
//! identical inputs produce bit-identical outputs across paths.

pub mod conv;
pub mod nn;
pub mod pool;

pub use conv::{conv3d, conv3d_grad_bias, conv3d_grad_input, conv3d_grad_weights, PadMode};
pub use nn::{
    batchnorm_eval, batchnorm_train, concat_channels, linear, relu, shifted_relu, sigmoid,
    softmax, split_channels, tanh_t,
};
pub use pool::{avgpool3d, avgpool3d_backward, maxpool3d, maxpool3d_backward};
