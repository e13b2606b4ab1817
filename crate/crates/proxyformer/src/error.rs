//! Error type shared across the crate.

/// Crate-wide error. Variants map onto the CLI exit codes (see
/// [`Error::exit_code`]): refusals, usage errors, and invalid configuration
/// exit with 2, everything else with 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller violated an argument contract (bad shape, axis out of range,
    /// empty input, value out of domain).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Incompatible tensor shapes.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A quantity that must be finite was not. `term` names the offending
    /// loss term or tensor.
    #[error("non-finite value in {term}: {value}")]
    NonFinite { term: String, value: f64 },

    /// The gradient checker's target function is not deterministic, so the
    /// check would be meaningless.
    #[error("oracle error: {0}")]
    Oracle(String),

    /// Malformed or incompatible configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed on-disk artifact (dataset file, checkpoint, report).
    #[error("format error: {0}")]
    Format(String),

    /// The CLI declines to act (e.g. output exists and --overwrite absent).
    #[error("{0}")]
    Refusal(String),

    /// Bad command-line usage detected after argument parsing.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    /// Process exit code for the CLI: 2 for problems the caller can fix by
    /// changing the invocation or config, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Refusal(_) | Error::Usage(_) | Error::Config(_) => 2,
            _ => 1,
        }
    }
}
