//! Deterministic numeric kernels and the tensor file codec.
//!
//! All arithmetic is `f64`; only the on-disk format narrows to `f32`.

pub mod codec;
pub mod linalg;
mod matrix;
pub mod normal;
mod rng;

use thiserror::Error;

pub use codec::{read_tensor, write_tensor, CodecError};
pub use linalg::{cholesky, cholesky_spd, covariance, solve_spd, spd_inverse, sym_eig, SymEig};
pub use matrix::{dot, Matrix};
pub use normal::{inv_normal_cdf, normal_cdf, normal_pdf};
pub use rng::SeededRng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape {rows}x{cols} overflows addressable size")]
    ShapeOverflow { rows: usize, cols: usize },
    #[error("data length {actual} does not match shape ({expected} expected)")]
    DataLength { expected: usize, actual: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix is not positive definite (last jitter {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },
    #[error("{op} did not converge after {iterations} iterations")]
    NoConvergence { op: &'static str, iterations: usize },
    #[error("{what}: argument {value} outside its domain")]
    Domain { what: &'static str, value: f64 },
}
