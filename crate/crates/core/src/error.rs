use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Too many lines of a line-oriented input failed to parse.
    #[error("{what}: {bad} of {total} lines malformed (first at line {first_line}: {first_message})")]
    Malformed {
        what: &'static str,
        bad: usize,
        total: usize,
        first_line: usize,
        first_message: String,
    },

    /// Binary container problem; `offset` is the byte position where reading stopped.
    #[error("{what} at byte {offset}: {message}")]
    Format {
        what: &'static str,
        offset: u64,
        message: String,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: String, message: String },
}
