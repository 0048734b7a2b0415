//! Error taxonomy shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A runtime argument violated an operation's precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A build-time configuration is inconsistent (channel arithmetic,
    /// reduction ratios, negative loss weights, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A dataset file is missing or cannot be paired with its annotation.
    #[error("load error: {0}")]
    Load(String),

    /// A raster file exists but cannot be decoded.
    #[error("format error: {0}")]
    Format(String),

    /// Checkpoint archive failed integrity or magic checks.
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    /// Checkpoint was written by an incompatible format revision.
    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    /// Checkpoint and model disagree on architecture (shapes or names).
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    /// Training diverged; carries enough context to locate the step.
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch}: bce={bce}, dice={dice}"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        bce: f64,
        dice: f64,
    },

    /// A promise the code makes to itself was broken. Callers should
    /// treat this as a bug, not as bad input.
    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors that indicate a bug rather than bad user input.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::Internal(_))
    }
}
