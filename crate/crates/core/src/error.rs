//! Error type shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible matrix or tensor dimensions.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An argument violates a documented precondition.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// A batch label has no prototype in the supplied set.
    #[error("missing class {class} in prototype set ({context})")]
    MissingClass { class: usize, context: String },

    /// A contrastive loss was requested over fewer than two classes.
    #[error("degenerate loss: {0}")]
    DegenerateLoss(String),

    /// Every anchor of a contrastive batch was skipped.
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    /// Train-mode batch statistics need at least two rows.
    #[error("batch size {0} too small for batch statistics (need >= 2)")]
    BatchSize(usize),

    /// A backward pass was requested from an eval-mode cache.
    #[error("mode error: {0}")]
    Mode(String),

    /// Experiment configuration is inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A serialized file is malformed; `offset` is the byte position.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Dataset content cannot be used (empty, out-of-range labels, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A Dirichlet allocation could not satisfy the per-client minimum.
    #[error("partition infeasible after {retries} retries: {message}")]
    PartitionInfeasible { retries: usize, message: String },

    /// A computation produced non-finite values.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
