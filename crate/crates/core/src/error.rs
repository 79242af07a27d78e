use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid axis {axis} for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("mask selects zero elements")]
    EmptyMask,

    #[error("malformed tape: {0}")]
    DisconnectedGraph(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("{0}")]
    Domain(String),

    #[error("missing prompt: {0}")]
    MissingPrompt(String),

    #[error("invalid mode: {0}")]
    InvalidMode(String),

    #[error("scene sampling exhausted after {attempts} attempts")]
    ExhaustedSampling { attempts: usize },

    #[error("task not applicable: {0}")]
    InapplicableTask(String),

    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),

    #[error("truncated blob {name}: need {needed} bytes, have {available}")]
    TruncatedBlob {
        name: String,
        needed: usize,
        available: usize,
    },

    #[error("checksum mismatch for {name}: expected {expected:08x}, got {actual:08x}")]
    ChecksumMismatch { name: String, expected: u32, actual: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("incompatible shapes for {name}: expected {expected:?}, got {actual:?}")]
    IncompatibleShapes {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("frozen parameter drift detected in {0}")]
    FrozenParamDrift(String),

    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),

    #[error("non-finite sampler state at step {0}")]
    NonFiniteState(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failed run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidMode(_)
                | Error::MissingPrompt(_)
                | Error::Domain(_)
                | Error::InapplicableTask(_)
        )
    }
}
