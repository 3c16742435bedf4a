use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} has zero norm")]
    ZeroRow { row: usize },

    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("empty input")]
    EmptyInput,

    #[error("k = {k} nearest neighbours requested but only {classes} classes exist (need 1 <= k <= classes - 1)")]
    KTooLarge { k: usize, classes: usize },

    #[error("row {row} is not unit norm (norm = {norm})")]
    NotNormalized { row: usize, norm: f64 },

    #[error("class {class} has non-positive inter-class compactness {ic}")]
    NonPositiveCompactness { class: usize, ic: f64 },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("negative balancing factor {beta} for class {class}")]
    NegativeBeta { class: usize, beta: f64 },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("batch of {batch} samples is too small for batch statistics (need >= 2)")]
    BatchTooSmall { batch: usize },

    #[error("forward cache does not belong to the current parameters")]
    StaleCache,

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("rejection sampling for domain centers exceeded {draws} draws")]
    SeparationUnsatisfiable { draws: usize },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("empty gallery")]
    EmptyGallery,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            Error::Io(e.into())
        } else {
            Error::Format(e.to_string())
        }
    }
}

impl Error {
    /// Process exit code used by the `db` binary.
    ///
    /// 1: usage or configuration, 2: I/O or file format, 3: numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Format(_) | Error::VersionMismatch { .. } => 2,
            Error::ZeroRow { .. }
            | Error::NotNormalized { .. }
            | Error::NonPositiveCompactness { .. }
            | Error::NegativeBeta { .. }
            | Error::NonFinite(_) => 3,
            _ => 1,
        }
    }
}
