use std::path::PathBuf;

/// Errors produced anywhere in the tokenizer pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("config validation failed: {}", format_violations(.0))]
    Validation(Vec<(String, String)>),

    #[error("config parse error at line {line}: {reason}")]
    ConfigParse { line: usize, reason: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("integration produced NaN at step {step}")]
    IntegrationNan { step: usize },

    #[error("NaN gradient for parameter `{0}`")]
    NanGradient(String),

    #[error("training diverged at step {step}: loss {loss} exceeds 10x moving average {average}")]
    Diverged { step: usize, loss: f64, average: f64 },

    #[error("token id {id} out of range for {bits}-bit groups")]
    TokenOutOfRange { id: u32, bits: usize },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint fingerprint {found} does not match config fingerprint {expected}")]
    FingerprintMismatch { found: String, expected: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint stage {found} cannot be used here: {reason}")]
    StageMismatch { found: String, reason: String },

    #[error("corrupt token file: {0}")]
    CorruptTokens(String),

    #[error("empty dataset at {0}")]
    EmptyDataset(PathBuf),

    #[error("output directory {0} is locked by another invocation")]
    Locked(PathBuf),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn format_violations(v: &[(String, String)]) -> String {
    v.iter().map(|(f, r)| format!("`{f}`: {r}")).collect::<Vec<_>>().join("; ")
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::Config { field: field.to_string(), reason: reason.into() }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
