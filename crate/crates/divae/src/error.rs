use thiserror::Error;

/// Errors surfaced by the library. Exit-code mapping for the CLI:
/// `Config` -> 2, `Numeric` -> 3, everything else -> 1.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration. Collects every violated field, not just the first.
    #[error("config error:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    /// A caller violated an operation's preconditions.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numeric failure (NaN/Inf or domain error) during forward or backward.
    #[error("numeric failure in `{op}`: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// Malformed input file (IDX or one of the binary formats).
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    /// Magic/version/checksum mismatch in a persisted artifact.
    #[error("format error: {0}")]
    Format(String),

    /// A pipeline stage was invoked before its upstream artifact exists.
    #[error("missing upstream artifact: {0}")]
    MissingStage(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric { op, detail: detail.into() }
    }

    /// CLI exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric { .. } => 3,
            _ => 1,
        }
    }
}
