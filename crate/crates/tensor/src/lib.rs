//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The operation set is deliberately small: what a convolutional
//! RGB-depth regression network with frequency-domain fusion needs, and
//! nothing else. Every operation records a vector-Jacobian product on an
//! implicit tape; [`Tensor::backward`] sweeps it in reverse creation order.

mod error;
pub mod gradcheck;
pub mod io;
mod ops;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::conv::conv_output_size;
pub use ops::pool::adaptive_bin;
pub use ops::spectral::{fft2, fft2_complex, ifft2, ComplexTensor};
pub use scalar::{DType, Scalar};
pub use tensor::{grad_enabled, no_grad, numel, Tensor};
