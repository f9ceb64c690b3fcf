//! Dense `f64` tensors, a reverse-mode tape, and a finite-difference
//! gradient oracle.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport, ParamCheck};
pub use params::{Bound, ParamStore};
pub use tape::{Gradients, Tape, Var, MASK_VALUE};
pub use tensor::{gelu, layer_norm, matmul, softmax_rows, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}
