use thiserror::Error;

/// Errors raised by the laboratory.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("point (t = {t}, x = {x:?}) outside the field domain [0, {horizon}]")]
    Domain { t: f64, x: Vec<f64>, horizon: f64 },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("simulation diverged at step {step} (t = {t}) on path {path}")]
    Diverged { step: usize, t: f64, path: usize },

    #[error("density must be positive at (t = {t}, x = {x:?}), got {value}")]
    NonPositiveDensity { t: f64, x: Vec<f64>, value: f64 },

    #[error("degenerate ensemble: {0}")]
    Degenerate(String),

    #[error("non-finite Lagrangian integrand on path {path} at t = {t}")]
    NotIntegrable { path: usize, t: f64 },

    #[error("step {0} was not recorded in this ensemble")]
    NotRecorded(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(LabError::Argument(msg.into()))
}
