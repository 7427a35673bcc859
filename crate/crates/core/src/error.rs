use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward called on a graph that was already consumed; run a new forward first")]
    StaleGraph,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("batch norm in eval mode has no running statistics yet")]
    MissingRunningStats,

    #[error("disparity range [{d_min}, {d_max}] is too wide for image width {width}")]
    RangeTooWide { d_min: i32, d_max: i32, width: usize },

    #[error("expected {expected} disparity channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("depth must be strictly positive (found {0})")]
    NonPositiveDepth(f32),

    #[error("every pixel of the image is a hole")]
    EntirelyHoles,

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: cannot decode image: {detail}")]
    Decode { path: PathBuf, detail: String },

    #[error("{path}: cannot encode image: {detail}")]
    Encode { path: PathBuf, detail: String },

    #[error("no matching right view for '{0}'")]
    UnmatchedFile(String),

    #[error("{0}: dataset is empty")]
    EmptyDataset(PathBuf),

    #[error("not a checkpoint file (bad magic)")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u32),

    #[error("checkpoint is truncated")]
    Truncated,

    #[error("checkpoint contains unknown parameters: {}", .0.join(", "))]
    UnknownParameters(Vec<String>),

    #[error("checkpoint is missing parameters: {}", .0.join(", "))]
    MissingParameters(Vec<String>),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
