use std::path::PathBuf;

use connex_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to load subject `{subject}`: {detail}")]
    Load { subject: String, detail: String },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

impl CoreError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from invalid user input rather than a
    /// failure during computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Self::Load { .. } | Self::Format { .. } | Self::Parameter(_) | Self::Config(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
