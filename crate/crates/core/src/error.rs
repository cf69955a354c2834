use thiserror::Error;

/// Errors raised by the numerical kernels, models, certifier and integrators.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("matrix is not symmetric: relative asymmetry {asymmetry:e}")]
    NotSymmetric { asymmetry: f64 },

    #[error("not PSD: eigenvalue {eigenvalue:e} below -{tolerance:e}")]
    NotPsd { eigenvalue: f64, tolerance: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sample index {index} out of range for {n} samples")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("initialization does not have the required structure: {0}")]
    Structure(String),

    #[error("could not draw a well-conditioned task after {attempts} attempts; try a larger n")]
    RejectionBudget { attempts: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn non_finite(what: impl Into<String>) -> Error {
    Error::NonFinite { what: what.into() }
}
