use thiserror::Error;

/// Errors raised anywhere in the generation pipeline.
#[derive(Debug, Error)]
pub enum FvnError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("argument error: {0}")]
    Argument(String),

    #[error("parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("lexicalization error: unmapped slot token {0}")]
    Lexicalization(String),

    #[error("init error: {0}")]
    Init(String),

    #[error("state error: {0}")]
    State(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl FvnError {
    /// Stable lowercase name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            FvnError::Dimension { .. } => "dimension",
            FvnError::Numeric { .. } => "numeric",
            FvnError::Argument(_) => "argument",
            FvnError::Parse { .. } => "parse",
            FvnError::Format { .. } => "format",
            FvnError::Lexicalization(_) => "lexicalization",
            FvnError::Init(_) => "init",
            FvnError::State(_) => "state",
            FvnError::Integrity(_) => "integrity",
            FvnError::Config(_) => "config",
            FvnError::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, FvnError>;

pub(crate) fn dim_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(FvnError::Dimension { op, detail: detail.into() })
}

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(FvnError::Argument(msg.into()))
}
