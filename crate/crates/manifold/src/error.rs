//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty elite set")]
    EmptyElite,

    #[error("smoothing factor {0} outside [0, 1]")]
    InvalidAlpha(f64),

    #[error("path has zero density under the current parameters (unsupported)")]
    UnsupportedPath,

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("degenerate objective: every sample in the batch scored non-finite")]
    DegenerateObjective,

    #[error("search exhausted after {iterations} iterations without a compliant pair")]
    SearchExhausted {
        iterations: usize,
        history: Vec<crate::engine::IterationReport>,
    },

    #[error("feature window [{start:.3}, {end:.3}] outside trace range [0, {trace_end:.3}]")]
    WindowOutOfRange { start: f64, end: f64, trace_end: f64 },

    #[error("schema digest mismatch: model expects {expected}, row set has {actual}")]
    SchemaMismatch { expected: String, actual: String },

    #[error("degenerate labels: training matrix contains a single class")]
    DegenerateLabels,

    #[error("record `{id}` violates label/kind/outcome consistency: {reason}")]
    InconsistentRecord { id: String, reason: String },

    #[error("insufficient records: {0}")]
    Shortfall(String),

    #[error("train and test kinds must be disjoint and non-empty")]
    BadPartition,

    #[error("feature extraction failed for record `{id}`: {source}")]
    Extraction {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("digest mismatch for {artifact}: declared {declared}, actual {actual}")]
    DigestMismatch {
        artifact: String,
        declared: String,
        actual: String,
    },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("malformed {what}: {detail}")]
    Malformed { what: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
