//! Error type shared by every module of the crate.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, BgkError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BgkError {
    /// Invalid parameters or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A callback or computation produced a NaN or infinity.
    #[error("non-finite value {value} at velocity node ({v1}, {v2}, {v3})")]
    NonFinite {
        value: f64,
        v1: f64,
        v2: f64,
        v3: f64,
    },

    /// Raw moments do not describe a positive density and temperature.
    #[error("non-realizable moments: rho = {rho}, T = {temperature}{}", location.as_ref().map(|l| format!(" at {l}")).unwrap_or_default())]
    Realizability {
        rho: f64,
        temperature: f64,
        location: Option<String>,
    },

    /// A quadrature domain too small to capture the integrand.
    #[error("quadrature domain error: {0}")]
    Domain(String),

    /// Time or index outside the admissible range.
    #[error("out of range: {0}")]
    OutOfRange(String),

    /// Two grids that must agree do not.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// Operation not supported for the given input.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Training diverged.
    #[error("non-finite loss at iteration {iteration} in component {component} (batch {batch})")]
    TrainingAborted {
        iteration: usize,
        component: String,
        batch: u64,
    },

    /// Reading or writing an artifact failed.
    #[error("i/o error: {0}")]
    Io(String),

    /// Malformed archive or checkpoint.
    #[error("format error: {0}")]
    Format(String),
}

impl BgkError {
    /// Stable machine-readable code used in error JSON.
    pub fn code(&self) -> &'static str {
        match self {
            BgkError::Config(_) => "config",
            BgkError::NonFinite { .. } => "non_finite",
            BgkError::Realizability { .. } => "realizability",
            BgkError::Domain(_) => "domain",
            BgkError::OutOfRange(_) => "out_of_range",
            BgkError::GridMismatch(_) => "grid_mismatch",
            BgkError::Unsupported(_) => "unsupported",
            BgkError::TrainingAborted { .. } => "training_aborted",
            BgkError::Io(_) => "io",
            BgkError::Format(_) => "format",
        }
    }
}

impl From<std::io::Error> for BgkError {
    fn from(e: std::io::Error) -> Self {
        BgkError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for BgkError {
    fn from(e: serde_json::Error) -> Self {
        BgkError::Format(e.to_string())
    }
}
