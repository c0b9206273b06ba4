use thiserror::Error;

use crate::marcus::ExitFlag;

/// Errors raised by the simulation and estimation routines.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("invalid jump measure: {0}")]
    InvalidMeasure(String),

    #[error("moment of order {p} diverges on [{lo}, {hi})")]
    DivergentMoment { p: f64, lo: f64, hi: f64 },

    #[error("jump flow left the domain at tau = {tau:.6}")]
    FlowEscape { tau: f64 },

    #[error("trajectory exited at t = {t}: {flag:?}")]
    ExitDetected { t: f64, flag: ExitFlag },

    #[error("point ({x}, {y}) is within tolerance of the critical set")]
    CriticalPoint { x: f64, y: f64 },

    #[error("quadrature did not converge: {0}")]
    QuadratureFailure(String),

    #[error("all {replicates} replicates exited before half the horizon")]
    AllTrajectoriesExited { replicates: usize },

    #[error("occupation measure is empty")]
    EmptyMeasure,

    #[error("estimate {value} at epsilon = {epsilon} is not positive")]
    NonPositiveEstimate { epsilon: f64, value: f64 },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("stationary problem has a degenerate nullspace (singular value gap {gap:.3e})")]
    DegenerateNullspace { gap: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
