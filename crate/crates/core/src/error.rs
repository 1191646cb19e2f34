use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("need at least {needed} points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("empty descriptor window")]
    EmptyWindow,

    #[error("invalid target dimension {k} for source dimension {dim}")]
    InvalidTarget { k: usize, dim: usize },

    #[error("label error: {0}")]
    Label(String),

    #[error("video too short: {frames} frames for {segments} segments")]
    VideoTooShort { frames: usize, segments: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("{path}:{line}: {detail}")]
    Parse { path: PathBuf, line: usize, detail: String },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("stage `{stage}` requires {missing}")]
    Dependency { stage: String, missing: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }

    /// Short stable identifier, used for machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::InsufficientPoints { .. } => "insufficient_points",
            Error::EmptyWindow => "empty_window",
            Error::InvalidTarget { .. } => "invalid_target",
            Error::Label(_) => "label",
            Error::VideoTooShort { .. } => "video_too_short",
            Error::Config(_) => "config",
            Error::Format { .. } => "format",
            Error::Parse { .. } => "parse",
            Error::Manifest(_) => "manifest",
            Error::Dependency { .. } => "dependency",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
