use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(#[from] dissflow_core::Error),

    #[error("certification failed: {0}")]
    Certification(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("output {file} violates its column contract: {reason}")]
    Schema { file: String, reason: String },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 invalid config, 2 numerical or output failure, 3 certification FAIL.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 1,
            Self::Numerical(_) | Self::Io { .. } | Self::Schema { .. } => 2,
            Self::Certification(_) => 3,
        }
    }
}

/// Maps a core error raised while building inputs to a config error.
pub(crate) fn invalid(e: dissflow_core::Error) -> CliError {
    CliError::Config(e.to_string())
}

pub type Result<T> = std::result::Result<T, CliError>;
