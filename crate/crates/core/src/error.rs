//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MfgError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("unsupported coupling: exact W2 in dimension >= 2 requires equal particle counts (got {0} and {1})")]
    UnsupportedCoupling(usize, usize),

    #[error("model evaluation failed at {context}: {message}")]
    ModelEvaluation { context: String, message: String },

    #[error("Newton iteration for the control minimizer diverged after {iterations} iterations (last residual {residual:.3e})")]
    NewtonDivergence { iterations: usize, residual: f64 },

    #[error("control Hessian D_v^2 f is numerically singular at {0}")]
    SingularHessian(String),

    #[error("Picard iteration diverged: {0}")]
    PicardDivergence(String),

    #[error("measure-flow fixed point failed to converge; last two flow distances {0:.3e}, {1:.3e}")]
    FlowDivergence(f64, f64),

    #[error("Riccati integration blew up: |entry| = {0:.3e} exceeds bound {1:.3e}")]
    BlowUp(f64, f64),

    #[error("unsupported measure dependence: {0}")]
    UnsupportedMeasureDependence(String),

    #[error("operation requires sigma_2 = 0 (time-regularity assumption not satisfied)")]
    MissingA4,

    #[error("operation only implemented for n = d = 1 (got n = {0}, d = {1})")]
    UnsupportedDimension(usize, usize),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MfgError>;
