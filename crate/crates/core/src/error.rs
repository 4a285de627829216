use std::path::PathBuf;

/// Errors raised across the crate.
///
/// Format failures of model completions are *not* errors; they are carried as
/// [`crate::format::FormatFailure`] values so rewards can consume them.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("sequence of {len} tokens exceeds the context window of {window}")]
    ContextOverflow { len: usize, window: usize },

    #[error("loss mask selects no positions")]
    EmptyLoss,

    #[error("non-finite value in {0}")]
    NumericalFailure(String),

    #[error("shape mismatch: {0}")]
    ShapeError(String),

    #[error("malformed checkpoint: {0}")]
    FormatError(String),

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("cannot tokenize {0:?}")]
    TokenError(String),

    #[error("advantage estimation needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("task generation failed: {0}")]
    GenerationFailure(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("manifest check failed: {0}")]
    Manifest(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
