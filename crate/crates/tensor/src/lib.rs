//! Minimal tensor library with reverse-mode automatic differentiation.
//!
//! The operator set is exactly what the detector network needs: same-padded
//! 2-D convolution, ReLU, sigmoid, softmax, matmul, concat, bilinear resize,
//! max pooling, elementwise add and scale, a fused windowed self-attention
//! and a clamped binary cross-entropy, plus the reshapes that glue them.

pub mod bundle;
pub mod gradcheck;
mod error;
mod graph;
pub mod optim;
mod params;
mod real;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Conv2d, Graph, Var};
pub use optim::{AdamConfig, OptimState};
pub use params::ParamSet;
pub use real::Real;
pub use tensor::Tensor;
