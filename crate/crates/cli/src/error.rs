use std::path::Path;

use connex_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or unusable input files.
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub(crate) fn input(path: &Path, e: std::io::Error) -> Self {
        Self::Usage(format!("cannot read {}: {e}", path.display()))
    }

    /// 1 for validation failures, 2 for failures during computation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Core(e) if e.is_validation() => 1,
            Self::Core(_) | Self::Runtime(_) => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
