use std::path::PathBuf;

/// Errors produced by every module of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("map is {width}x{height}, operation needs at least {min}x{min}")]
    DimensionTooSmall {
        width: usize,
        height: usize,
        min: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("map contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("unsupported channel count {0}")]
    UnsupportedChannels(usize),
    #[error("non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("intrinsics need positive focal lengths, got fx={fx}, fy={fy}")]
    InvalidIntrinsics { fx: f64, fy: f64 },
    #[error("warp is invalid at pixel ({u}, {v})")]
    InvalidWarp { u: f64, v: f64 },
    #[error("no valid pixels to average over")]
    EmptyValidSet,
    #[error("mean depth must be positive, got {0}")]
    NonPositiveMeanDepth(f64),
    #[error("reconstruction scale {scale} mismatches the input pyramid: {reason}")]
    ScaleChainMismatch { scale: usize, reason: String },
    #[error("ray through pixel ({u}, {v}) hits no plane")]
    RayMiss { u: usize, v: usize },
    #[error("pixel ({u}, {v}) is outside the {width}x{height} map")]
    InvalidPixel {
        u: usize,
        v: usize,
        width: usize,
        height: usize,
    },
    #[error("optimization diverged: {0}")]
    Diverged(String),
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("trajectory too short: {0}")]
    TrajectoryTooShort(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
