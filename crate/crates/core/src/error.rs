use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimMismatch {
        expected: [usize; 3],
        actual: [usize; 3],
    },

    #[error("class {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("no foreground voxels")]
    NoForeground,

    #[error("class {0} absent from prediction")]
    NoPrediction(u8),

    #[error("mean over an empty mask is undefined")]
    EmptyMask,

    #[error("not a NIfTI-1 single file: {0}")]
    NotNifti(String),

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedFormat(i16),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("manifest parse error at line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("oracle unavailable: {0}")]
    OracleUnavailable(String),

    #[error("oracle protocol error: {0}")]
    Protocol(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
