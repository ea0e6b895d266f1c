use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("parameter sets differ: {0}")]
    ParamMismatch(String),
    #[error("invalid FSQ configuration: {0}")]
    Fsq(String),
    #[error("codebook index {index} out of range for codebook of size {size}")]
    IndexOutOfRange { index: u64, size: u64 },
    #[error("{0} is disabled in this configuration")]
    HeadDisabled(&'static str),
    #[error("replay buffer not ready: {0}")]
    NotReady(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("config: {0}")]
    Config(String),
    #[error("unknown environment `{0}`")]
    UnknownEnv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(
    context: impl Into<String>,
    expected: impl std::fmt::Debug,
    got: impl std::fmt::Debug,
) -> Error {
    Error::Shape {
        context: context.into(),
        expected: format!("{expected:?}"),
        got: format!("{got:?}"),
    }
}
