use thiserror::Error;

pub type Result<T> = std::result::Result<T, FwaError>;

#[derive(Debug, Error)]
pub enum FwaError {
    #[error("parse error on line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("backbone aborted at block {block}: {reason}")]
    Aborted { block: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FwaError {
    /// Process exit code for the CLI: 2 for usage/config problems, 3 for
    /// runtime or numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            FwaError::Parse { .. }
            | FwaError::Schema(_)
            | FwaError::Config(_)
            | FwaError::Io(_)
            | FwaError::Json(_) => 2,
            FwaError::Shape(_)
            | FwaError::Numeric(_)
            | FwaError::Contract(_)
            | FwaError::Aborted { .. } => 3,
        }
    }
}
