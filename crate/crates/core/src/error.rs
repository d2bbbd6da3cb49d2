use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Topology violates an incidence or graph invariant.
    #[error("structural error: {0}")]
    Structure(String),

    #[error("invalid parameter `{name}`: {reason}")]
    Param { name: String, reason: String },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{solver} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("matrix is singular to working precision")]
    Singular,

    #[error("non-finite state at t = {time} s: {detail}")]
    NonFinite { time: f64, detail: String },

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("eigensolver: {0}")]
    Eigen(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Param {
            name: name.into(),
            reason: reason.into(),
        }
    }

    /// True for failures of a numerical solver (as opposed to bad input).
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence { .. }
                | Error::Singular
                | Error::NonFinite { .. }
                | Error::Eigen(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
