use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("computation record: {0}")]
    Graph(String),

    #[error("malformed PTKT data at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("unsupported PTKT version {found} (expected 1)")]
    UnsupportedVersion { found: u8 },

    #[error("truncated PTKT data at byte {offset}: missing {missing} byte(s)")]
    Truncated { offset: u64, missing: u64 },

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("failing checks: {}", .0.join(", "))]
    ChecksFailed(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
