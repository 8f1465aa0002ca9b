use thiserror::Error;

/// Errors raised anywhere in the synthesis and simulation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: expected a square matrix, got {rows}x{cols}")]
    NonSquare {
        op: &'static str,
        rows: usize,
        cols: usize,
    },

    #[error("{op}: dimension mismatch: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Cholesky factorization met a nonpositive pivot (or the input was not symmetric).
    #[error("matrix is not symmetric positive definite ({detail})")]
    NotSpd { detail: String },

    #[error("array is not controllable: rank(W_c) = {rank}, need {needed}")]
    NotControllable { rank: usize, needed: usize },

    #[error("array is not observable: rank(W_o) = {rank}, need {needed}")]
    NotObservable { rank: usize, needed: usize },

    #[error("no {which} threshold found below tau_max = {tau_max}")]
    NoThreshold { which: &'static str, tau_max: f64 },

    #[error("{op}: iteration did not converge")]
    NoConvergence { op: &'static str },

    #[error("simulation diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("random generation failed after {attempts} attempts")]
    GenerationFailed { attempts: usize },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },
}

impl Error {
    /// True for errors that mean the array or the chosen parameters failed a
    /// certification step, as opposed to malformed input or a numeric abort.
    pub fn is_certification_failure(&self) -> bool {
        matches!(
            self,
            Error::NotSpd { .. }
                | Error::NotControllable { .. }
                | Error::NotObservable { .. }
                | Error::NoThreshold { .. }
        )
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
