use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: cannot parse sample {text:?}")]
    NonNumericSample {
        path: PathBuf,
        line: usize,
        text: String,
    },

    #[error("invalid manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sample rate must be positive, got {0}")]
    InvalidRate(f64),

    #[error("ppg covers {ppg_s:.3} s but ecg covers {ecg_s:.3} s (tolerance {tolerance_s:.4} s)")]
    DurationMismatch {
        ppg_s: f64,
        ecg_s: f64,
        tolerance_s: f64,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("checksum mismatch: file is corrupted")]
    Checksum,

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("unrecognized file format: {0}")]
    BadMagic(String),

    #[error("unknown block {0:?}")]
    UnknownBlock(String),

    #[error("invalid band edges: low {low_hz} Hz, high {high_hz} Hz, sample rate {sample_rate_hz} Hz")]
    BandEdges {
        low_hz: f64,
        high_hz: f64,
        sample_rate_hz: f64,
    },

    #[error("signal too short: need at least {needed} samples, got {got}")]
    SignalTooShort { needed: usize, got: usize },

    #[error("zero-variance signal cannot be normalized")]
    ZeroVariance,

    #[error("no peaks found")]
    NoPeaks,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("label {0} BPM outside the accepted band")]
    LabelOutOfBand(f64),

    #[error("duplicate window ({subject_id}, {window_index})")]
    DuplicateWindow {
        subject_id: String,
        window_index: usize,
    },

    #[error("report is inconsistent: {0}")]
    Report(String),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
