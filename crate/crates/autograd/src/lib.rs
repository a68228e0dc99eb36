//! Dense tensors and a tape-based reverse-mode differentiator with exactly
//! the operators a 1D convolutional classifier needs: valid/same
//! convolution, average pooling, batch normalization, ReLU, dense layers,
//! flatten/concat and softmax cross-entropy. Also ships Adam and a
//! finite-difference gradient checker.

pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use optim::{adam_step, Adam, AdamConfig, AdamState};
pub use scalar::Scalar;
pub use tape::{BatchStats, Gradients, Padding, Tape, Var};
pub use tensor::Tensor;
