use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-positive depth {depth} (point on or behind the camera plane)")]
    NonPositiveDepth { depth: f64 },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("trace needs at least 2 timesteps, got {frames}")]
    HorizonMismatch { frames: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no frame exceeds the motion threshold")]
    NoMotionFound,

    #[error("track {track} is behind the reference camera (Z = {depth})")]
    BehindCamera { track: usize, depth: f64 },

    #[error("only {available} tracks are usable at the reference frame, grid needs {required}")]
    InsufficientTracks { available: usize, required: usize },

    #[error("invalid chunk: {0}")]
    InvalidChunk(String),

    #[error("predicted and sensor depth maps share no valid pixel")]
    NoValidOverlap,

    #[error("depth map has no valid pixel")]
    AllDepthMissing,

    #[error("feature streams disagree on token count: {0}")]
    StreamMismatch(String),

    #[error("grid {rows}x{cols} is not divisible by patch size {patch}")]
    OddGrid { rows: usize, cols: usize, patch: usize },

    #[error("interpolation time {0} outside [0, 1]")]
    TauOutOfRange(f64),

    #[error("non-finite loss at batch sample {sample}")]
    NonFiniteLoss { sample: usize },

    #[error("empty trace")]
    EmptyTrace,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown feature provider `{0}`")]
    UnknownProvider(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
