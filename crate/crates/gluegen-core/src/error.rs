//! Error type shared by every module in the crate.
//!
//! Each failure mode callers are expected to branch on gets its own variant;
//! free-form context rides along in the payload so messages stay diagnosable
//! without string matching.

use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error enum.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents do not line up for the named tape operation.
    #[error("shape mismatch in `{op}`: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A shape or index that is invalid on its own (bad rank, zero extent,
    /// element count not matching the shape, out-of-range slice, ...).
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// An operation produced a NaN or infinity.
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    /// A scalar was required (backward roots, loss extraction).
    #[error("expected a scalar value, got shape {0}")]
    NotScalar(String),

    /// Lookup of a parameter name that the store does not contain.
    #[error("unknown parameter `{name}`")]
    UnknownParam { name: String },

    /// Attempt to register the same parameter name twice.
    #[error("duplicate parameter `{name}`")]
    DuplicateParam { name: String },

    /// `backward` reached a parameter bound to a store that was not passed in.
    #[error("parameter store #{store_id} (owner of `{name}`) was not passed to backward")]
    MissingStore { store_id: u64, name: String },

    /// Optimizer stepped over a trainable parameter that has no gradient.
    #[error("parameter `{name}` has no gradient; run backward before stepping")]
    MissingGradient { name: String },

    /// Invalid model, loss, or trainer configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Fusion window that does not satisfy `1 <= k` and `2k < len`.
    #[error("fusion window k={k} is invalid for token length {len}: need 1 <= k and 2k < len")]
    FusionWindow { k: usize, len: usize },

    /// Token-weight vector that cannot be normalized.
    #[error("degenerate token weights: {0}")]
    DegenerateWeights(String),

    /// A batch or corpus with no records where at least one is required.
    #[error("empty batch")]
    EmptyBatch,

    /// Filesystem failure, annotated with the path involved.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A malformed on-disk artifact (bad magic, truncation, bad lengths, ...).
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    /// Positional pairing of stores with different record counts.
    #[error("record count mismatch: source has {src}, target has {tgt}")]
    CountMismatch { src: usize, tgt: usize },

    /// Id-based pairing found no ids in common.
    #[error("id join produced no pairs")]
    EmptyJoin,

    /// Checkpoint architecture digest does not match the requested config.
    #[error("config digest mismatch: checkpoint has {stored}, requested {requested}")]
    DigestMismatch { stored: String, requested: String },

    /// Training aborted on a non-finite loss. Carries the last finite loss
    /// report so the failure is diagnosable.
    #[error("training diverged at step {step}: loss is not finite (last finite report: {last_finite})")]
    Diverged { step: u64, last_finite: String },

    /// Diagnostics failure (too few records, zero variance, width mismatch).
    #[error("diagnostics: {0}")]
    Diagnostics(String),
}

impl Error {
    /// Wrap an io error with the path that produced it.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
