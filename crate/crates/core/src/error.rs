use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the processing engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt header in {path}: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },
    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("burst contains no frames")]
    EmptyBurst,
    #[error("frame {index} is {found_w}x{found_h}, expected {expected_w}x{expected_h}")]
    DimensionMismatch {
        index: usize,
        expected_w: usize,
        expected_h: usize,
        found_w: usize,
        found_h: usize,
    },
    #[error("frame {index} has CFA {found}, burst uses {expected}")]
    CfaMismatch {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("image {width}x{height} too small for {levels} pyramid levels")]
    ImageTooSmall {
        width: usize,
        height: usize,
        levels: usize,
    },
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("model is untrained")]
    Untrained,
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Numeric(_) => true,
            Error::Stage { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
