use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{what} out of domain: {value}")]
    Domain { what: &'static str, value: f64 },

    #[error("prediction conversion is singular at t={t} (coefficient {coef:e})")]
    Singular { t: f64, coef: f64 },

    #[error("degenerate reference: {0}")]
    DegenerateReference(String),

    #[error("no convergence: {0}")]
    NoConvergence(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training diverged at step {step} (last good step: {last_good:?})")]
    Diverged { step: usize, last_good: Option<usize> },

    #[error("embedding provider failed for record {record}: {message}")]
    Provider { record: String, message: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short code used as the CLI error prefix.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "E_SHAPE",
            Error::NonFinite(_) => "E_NUMERIC",
            Error::Contract(_) => "E_CONTRACT",
            Error::Domain { .. } => "E_DOMAIN",
            Error::Singular { .. } => "E_SINGULAR",
            Error::DegenerateReference(_) => "E_DEGENERATE",
            Error::NoConvergence(_) => "E_CONVERGENCE",
            Error::Empty(_) => "E_EMPTY",
            Error::Diverged { .. } => "E_DIVERGED",
            Error::Provider { .. } => "E_PROVIDER",
            Error::Config(_) => "E_CONFIG",
            Error::Parse { .. } => "E_PARSE",
            Error::Io { .. } => "E_IO",
            Error::Json(_) => "E_JSON",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl std::fmt::Display, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.to_string(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
