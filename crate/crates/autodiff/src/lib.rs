//! Minimal dense-tensor math with reverse-mode differentiation.
//!
//! Covers exactly what the convolutional BiGAN branches need: affine maps,
//! strided 2-D/3-D convolution and its transpose, leaky rectifier, logistic,
//! batch normalization, a few elementwise reductions, and an adaptive-moment
//! optimizer.

pub mod checkpoint;
pub mod conv;
mod error;
pub mod graph;
pub mod optim;
mod scalar;
mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{BatchStats, ConvSpec, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use scalar::Scalar;
pub use tensor::{ParameterSet, Tensor};
