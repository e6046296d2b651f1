use std::path::PathBuf;

use thiserror::Error;

/// Failure while evaluating or differentiating an expression.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("domain error at node {node} ({op}): operand {operand}")]
    Domain {
        node: usize,
        op: &'static str,
        operand: f64,
    },
    #[error("non-finite value at node {node} ({op}): {value}")]
    NonFinite {
        node: usize,
        op: &'static str,
        value: f64,
    },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing column `{0}` in CSV header")]
    MissingColumn(String),

    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("evaluation failed{}: {source}", context.as_deref().map(|c| format!(" ({c})")).unwrap_or_default())]
    Eval {
        #[source]
        source: EvalError,
        context: Option<String>,
    },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("training aborted in the {player} update: {reason}")]
    Aborted {
        player: &'static str,
        reason: String,
        /// Epochs completed before the failure.
        trace: Box<crate::optimize::TrainTrace>,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("malformed cache: {0}")]
    Cache(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl From<EvalError> for Error {
    fn from(source: EvalError) -> Self {
        Error::Eval {
            source,
            context: None,
        }
    }
}

impl Error {
    pub fn eval_in(source: EvalError, context: impl Into<String>) -> Self {
        Error::Eval {
            source,
            context: Some(context.into()),
        }
    }

    /// Process exit code: 2 for configuration or dependency problems, 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Eval { .. } | Error::Aborted { .. } | Error::Divergence(_) | Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
