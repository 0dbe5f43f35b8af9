use std::io;

use thiserror::Error;

/// Errors produced by the library.
///
/// Every variant has a short stable `kind()` so that the CLI can emit
/// machine-parsable diagnostics.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("degenerate Fisher vector")]
    DegenerateFisherVector,

    #[error("degenerate pooled vector")]
    DegeneratePooledVector,

    #[error("degenerate projection")]
    DegenerateProjection,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient data: {samples} samples for {clusters} clusters")]
    InsufficientData { samples: usize, clusters: usize },

    #[error("insufficient rank: need {needed}, numerical rank is {rank}")]
    InsufficientRank { needed: usize, rank: usize },

    #[error("LDA rank bound exceeded: requested {requested} dims with {classes} classes")]
    LdaRankBoundExceeded { requested: usize, classes: usize },

    #[error("corpus too small: {0}")]
    CorpusTooSmall(String),

    #[error("undefined AP: query has no relevant items")]
    UndefinedAp,

    #[error("no queries to evaluate")]
    NoQueries,

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyInput => "empty_input",
            Error::DegenerateFisherVector => "degenerate_fisher_vector",
            Error::DegeneratePooledVector => "degenerate_pooled_vector",
            Error::DegenerateProjection => "degenerate_projection",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidModel(_) => "invalid_model",
            Error::InvalidInput(_) => "invalid_input",
            Error::InsufficientData { .. } => "insufficient_data",
            Error::InsufficientRank { .. } => "insufficient_rank",
            Error::LdaRankBoundExceeded { .. } => "lda_rank_bound_exceeded",
            Error::CorpusTooSmall(_) => "corpus_too_small",
            Error::UndefinedAp => "undefined_ap",
            Error::NoQueries => "no_queries",
            Error::Manifest(_) => "invalid_manifest",
            Error::Format { .. } => "bad_format",
            Error::Protocol(_) => "protocol_violation",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
