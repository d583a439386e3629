use rotavg::{ConfigError, EnvError, IoError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or flag combinations.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("{context}: {source}")]
    File {
        context: String,
        #[source]
        source: std::io::Error,
    },
    /// Runs that failed inside a bench grid; outputs were still written.
    #[error("{failed} of {total} bench runs failed")]
    PartialBench { failed: usize, total: usize },
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self::Usage(msg.into())
    }

    pub fn file(context: impl Into<String>, source: std::io::Error) -> Self {
        Self::File {
            context: context.into(),
            source,
        }
    }

    /// 0 success, 1 usage, 2 data, 3 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Io(_) | Self::Env(_) | Self::File { .. } | Self::PartialBench { .. } => 2,
            Self::Internal(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Usage(e.to_string())
    }
}
