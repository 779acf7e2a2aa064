use thiserror::Error;

use crate::solver::ConvergenceTrace;

/// Errors raised by the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("depth planes outside the axial field of view: {planes:?}")]
    PlanesOutsideFov { planes: Vec<f64> },

    #[error("sources outside the volumetric field of view: {indices:?}")]
    SourcesOutsideFov { indices: Vec<usize> },

    #[error("PSF stack is empty")]
    EmptyStack,

    #[error("non-finite value in `{field}` at iteration {iteration}")]
    NonFinite { field: &'static str, iteration: usize },

    #[error("solver diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        trace: Box<ConvergenceTrace>,
    },

    #[error("{0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        field,
        reason: reason.into(),
    }
}
