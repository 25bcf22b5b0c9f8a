// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.
//!
//! Every variant carries a stable machine-readable code (see [`Error::code`])
//! that the CLI emits in its JSON error payloads.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
#[non_exhaustive]
pub enum Error {
    // --- linear algebra ---------------------------------------------------
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{method} did not converge within {iterations} iterations")]
    NoConvergence {
        method: &'static str,
        iterations: usize,
    },

    #[error("zero-norm input to {0}")]
    ZeroVector(&'static str),

    #[error("need at least {needed} samples, found {found}")]
    TooFewSamples { needed: usize, found: usize },

    #[error("samples have zero variance in every direction")]
    ZeroVariance,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    // --- RAD container -----------------------------------------------------
    #[error("bad magic: expected \"RAD1\"")]
    BadMagic,

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated payload at {record}")]
    TruncatedPayload { record: String },

    #[error("record {record} overlaps a previous region")]
    OffsetOverlap { record: String },

    #[error("shape mismatch at {record}: {detail}")]
    ShapeMismatch { record: String, detail: String },

    #[error("malformed manifest: {0}")]
    BadManifest(String),

    // --- concept pipeline ----------------------------------------------------
    #[error("stimulus template: {0}")]
    Template(String),

    #[error("empty answer for pair {pair_id}")]
    EmptyAnswer { pair_id: String },

    #[error("unmatched record: pair {pair_id}, k={k}, layer {layer}")]
    UnmatchedRecord {
        pair_id: String,
        k: u32,
        layer: usize,
    },

    #[error("layer {layer}: differences are degenerate ({detail})")]
    DegenerateLayer { layer: usize, detail: &'static str },

    #[error("layer {layer}: mean projection is zero, orientation undecidable")]
    UndecidableOrientation { layer: usize },

    #[error("layer {layer} missing")]
    MissingLayer { layer: usize },

    #[error("concept direction is not sign-calibrated")]
    Uncalibrated,

    // --- spectra -------------------------------------------------------------
    #[error(
        "matrix is not row-stochastic (max row-sum deviation {max_row_sum_deviation:e}, min entry {min_entry:e})"
    )]
    NotStochastic {
        max_row_sum_deviation: f64,
        min_entry: f64,
    },

    #[error("layer {layer}, head {head}: {source}")]
    AtEntry {
        layer: usize,
        head: i64,
        #[source]
        source: Box<Error>,
    },

    // --- plumbing ------------------------------------------------------------
    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable identifier for machine-readable error reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::NotSquare { .. } => "not_square",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidShape(_) => "invalid_shape",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NoConvergence { .. } => "no_convergence",
            Error::ZeroVector(_) => "zero_vector",
            Error::TooFewSamples { .. } => "too_few_samples",
            Error::ZeroVariance => "zero_variance",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::BadMagic => "bad_magic",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::TruncatedPayload { .. } => "truncated_payload",
            Error::OffsetOverlap { .. } => "offset_overlap",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::BadManifest(_) => "bad_manifest",
            Error::Template(_) => "template",
            Error::EmptyAnswer { .. } => "empty_answer",
            Error::UnmatchedRecord { .. } => "unmatched_record",
            Error::DegenerateLayer { .. } => "degenerate_layer",
            Error::UndecidableOrientation { .. } => "undecidable_orientation",
            Error::MissingLayer { .. } => "missing_layer",
            Error::Uncalibrated => "uncalibrated",
            Error::NotStochastic { .. } => "not_stochastic",
            Error::AtEntry { source, .. } => source.code(),
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn at(layer: usize, head: i64) -> impl FnOnce(Error) -> Error {
        move |source| Error::AtEntry {
            layer,
            head,
            source: Box::new(source),
        }
    }
}
