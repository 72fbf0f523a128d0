use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("token `{token}` is not in the template vocabulary")]
    Vocabulary { token: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("length error: {frames} frames outside [{min}, {max}]")]
    Length {
        frames: usize,
        min: usize,
        max: usize,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("insufficient data for {what}: need {needed}, have {available}")]
    InsufficientData {
        what: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("non-finite {stage} loss at step {step}, batch {batch}: {detail}")]
    NonFiniteLoss {
        stage: &'static str,
        step: usize,
        batch: usize,
        detail: String,
    },

    #[error(
        "feature extractors failed validation: margin {margin:.4} below required {required:.4}"
    )]
    ExtractorQuality { margin: f64, required: f64 },

    #[error("malformed {what} at byte offset {offset}: {detail}")]
    Format {
        what: &'static str,
        offset: u64,
        detail: String,
    },

    #[error("checksum mismatch in {path}: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },

    #[error(
        "checkpoint {path} was written for a different {component} configuration (digest mismatch)"
    )]
    DigestMismatch {
        path: PathBuf,
        component: &'static str,
    },

    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
