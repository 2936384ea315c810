use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("input `{0}` is not bound")]
    Unbound(String),

    #[error("invalid graph state: {0}")]
    State(String),

    #[error("invalid argument to {op}: {detail}")]
    Argument { op: &'static str, detail: String },
}

impl AutodiffError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn argument(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Argument {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
