//! Dense matrix algebra and a reverse-mode differentiation tape.
//!
//! Everything in the crate is built from the primitives here: [`Matrix`]
//! for values, [`Tape`] for recording differentiable computations, and a
//! Cholesky solver for the kernel baseline and the least-squares probes.

mod gradcheck;
mod linalg;
mod matrix;
mod tape;

pub use gradcheck::{check_gradients, GradCheckOptions, GradCheckReport, ParamCheck};
pub use linalg::Cholesky;
pub use matrix::{dot, l2_normalize_rows, softmax_rows, Matrix};
pub(crate) use matrix::softmax_in_place;
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {}×{} and {}×{}", left.0, left.1, right.0, right.1)]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{rows}×{cols} matrix cannot hold {len} entries")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("row {row} has zero norm")]
    ZeroRow { row: usize },
    #[error("expected a 1×1 value, got {}×{}", shape.0, shape.1)]
    NotScalar { shape: (usize, usize) },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("matrix is not positive definite: pivot {pivot} is {value:e}")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("support index {index} out of range for batch of {batch}")]
    BadSupport { index: usize, batch: usize },
}
