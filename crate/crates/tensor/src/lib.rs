//! Deterministic reverse-mode differentiation for small convolutional networks.
//!
//! The engine is deliberately narrow: NCHW `f64` tensors, eager evaluation
//! recorded on a [`Tape`], and the handful of operations encoder/decoder
//! image networks need (convolution with asymmetric zero padding, instance
//! and batch normalization, ReLU/tanh, 2x nearest upsampling, 2x2 average
//! pooling, channel concatenation and the elementwise pieces of regression
//! losses). All kernels are single-threaded with a fixed reduction order, so
//! equal inputs always give bit-identical values and gradients.

mod conv;
mod tape;
mod tensor;

pub use conv::{Conv2dSpec, Padding};
pub use tape::{avg_pool2x, BatchStats, Gradients, Tape, Var, NORM_EPS};
pub use tensor::Tensor;
