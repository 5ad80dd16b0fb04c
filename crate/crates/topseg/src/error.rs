//! Error type shared across the pipeline.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Filesystem-level failure with the offending path attached.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Structurally broken or truncated WAV container.
    #[error("malformed wav file {path}: {detail}")]
    WavFormat { path: PathBuf, detail: String },

    /// WAV encoding we do not support (e.g. exotic bit depths).
    #[error("unsupported wav encoding in {path}: {detail}")]
    WavUnsupported { path: PathBuf, detail: String },

    /// Recording contains no samples.
    #[error("recording {id} is empty")]
    EmptyRecording { id: String },

    /// Recording is too short for the requested operation.
    #[error("recording {id} too short: {detail}")]
    RecordingTooShort { id: String, detail: String },

    /// Signal has zero variance and cannot be z-scored.
    #[error("signal is constant; z-score undefined")]
    ConstantSignal,

    /// Signal shorter than one embedding window of the named scale.
    #[error("signal too short for scale {scale}: needs {needed} samples, got {got}")]
    SignalTooShort {
        scale: String,
        needed: usize,
        got: usize,
    },

    /// Invalid configuration value.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Point cloud with fewer than two points has no edges to build.
    #[error("degenerate point cloud: {n} point(s)")]
    DegenerateCloud { n: usize },

    /// Brute-force reference computation refused an oversized input.
    #[error("oracle supports at most {max} points, got {n}")]
    OracleTooLarge { n: usize, max: usize },

    /// Persistence pair with birth after death.
    #[error("invalid persistence pair: birth {birth} > death {death}")]
    InvalidPair { birth: f64, death: f64 },

    /// Landscape operands disagree in shape or grid.
    #[error("landscape mismatch: {0}")]
    LandscapeMismatch(String),

    /// Feature cache file could not be validated.
    #[error("invalid feature cache {path}: {detail}")]
    CacheInvalid { path: PathBuf, detail: String },

    /// Label file or label sequence problem.
    #[error("label error: {0}")]
    Label(String),

    /// Model file problem (bad magic, shape mismatch, ...).
    #[error("model error: {0}")]
    Model(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    TrainingDiverged { epoch: usize },

    /// Evaluation-side failure (mismatched lengths, empty manifest, ...).
    #[error("evaluation error: {0}")]
    Eval(String),
}

impl Error {
    /// Wrap an [`std::io::Error`] together with the path it occurred on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
