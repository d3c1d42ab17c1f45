//! Crate-wide error type.

use thiserror::Error;

use crate::train::TrainHistory;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numerical instability in layer {layer}, head {head}: {detail}")]
    Instability {
        layer: usize,
        head: usize,
        detail: String,
    },

    #[error("degenerate attention row {row}: sum {sum:e} is below 1e-300")]
    DegenerateRow { row: usize, sum: f64 },

    #[error("checkpoint conversion failed: missing tensors {missing:?}, unexpected tensors {extra:?}")]
    Conversion {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("input error: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("training diverged at step {step}: loss non-finite twice consecutively")]
    Divergence {
        step: usize,
        history: Box<TrainHistory>,
    },
}
