use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (shapes, ranges, required inputs).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical failure{}: {msg}", node.map(|n| format!(" at node {n}")).unwrap_or_default())]
    Numerical { node: Option<usize>, msg: String },

    #[error("packed length {len} exceeds max_len {max}{}", example.as_ref().map(|e| format!(" (example {e})")).unwrap_or_default())]
    Length { len: usize, max: usize, example: Option<String> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Attach the offending example to a length error.
    pub fn for_example(self, example: impl ToString) -> Self {
        match self {
            Error::Length { len, max, .. } => Error::Length { len, max, example: Some(example.to_string()) },
            other => other,
        }
    }
}
