//! Minimal dense tensor engine with reverse-mode differentiation.

mod gradcheck;
mod graph;
pub mod ops;
mod optim;
mod scalar;
mod tensor;

pub use gradcheck::{relative_error, GradCheck, GradCheckReport};
pub use graph::{BackwardFn, Graph, Var};
pub use ops::{Activation, ConvGeometry, CrossEntropyStats};
pub use optim::{Adam, AdamConfig};
pub use scalar::{gemm, MatRef, Scalar};
pub use tensor::Tensor;
