use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed caption: {0:?}")]
    MalformedCaption(String),

    #[error("annotation {session_id} span [{start}, {end}) s exceeds session of {frames} frames at {fps} fps")]
    SpanOutOfRange {
        session_id: String,
        start: f64,
        end: f64,
        frames: usize,
        fps: f64,
    },

    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    #[error("clip {clip_id} ({width}x{height}x{frame_count}) matches no declared bucket")]
    BucketMismatch {
        clip_id: String,
        width: usize,
        height: usize,
        frame_count: usize,
    },

    #[error("invalid bucket {0}")]
    InvalidBucket(String),

    #[error("no trackable object in clip")]
    NoTrackableObject,

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid layer index {index} (model has {layers} layers)")]
    InvalidLayerIndex { index: usize, layers: usize },

    #[error("unknown class id {0}")]
    UnknownClassId(String),

    #[error("unknown adapter target {0:?}")]
    UnknownTarget(String),

    #[error("rank {rank} exceeds min(d_in, d_out) = {limit} for {target}")]
    RankTooLarge {
        target: String,
        rank: usize,
        limit: usize,
    },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("invalid guidance: {0}")]
    InvalidGuidance(String),

    #[error("empty manifest")]
    EmptyManifest,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("missing artifact {path}: {hint}")]
    ArtifactMissing { path: PathBuf, hint: String },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn corrupt(msg: impl Into<String>) -> Self {
        Error::CorruptCheckpoint(msg.into())
    }
}
