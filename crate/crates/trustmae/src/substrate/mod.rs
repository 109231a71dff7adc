//! Minimal differentiable dense-tensor layer: exactly the primitives the
//! model needs, each with a finite-difference-verified backward pass.

pub mod gradcheck;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use gradcheck::grad_check;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Parameter, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SubstrateError {
    #[error("data length {got} does not match shape product {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("{op}: incompatible shapes {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value {value} in {label}")]
    NonFinite { label: String, value: f64 },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("convolution output size is not a positive integer (input {input}, kernel {kernel}, stride {stride}, padding {padding})")]
    BadConvGeometry {
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
}
