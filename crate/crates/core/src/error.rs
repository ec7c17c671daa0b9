use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// One or more configuration problems, reported together.
    #[error("configuration error:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("privacy budget exhausted: {0}")]
    BudgetExhausted(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("document too short: {len} tokens, need at least {needed}")]
    TooShort { len: usize, needed: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) | Error::TooShort { .. } => 2,
            Error::MissingInput(_) => 3,
            Error::BudgetExhausted(_) => 4,
            Error::Numeric(_) => 5,
            Error::Io { .. } | Error::Json(_) | Error::Checkpoint(_) => 1,
        }
    }
}
