use std::path::PathBuf;

use crate::geometry::InvalidBox;
use crate::tensorcore::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Box(#[from] InvalidBox),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("image {w}x{h} is smaller than the {min}px minimum")]
    ImageTooSmall { w: usize, h: usize, min: usize },
    #[error("box does not intersect the image")]
    BoxOutsideImage,
    #[error("expected a {expected}x{expected} crop, got {got:?}")]
    Resolution { expected: usize, got: Vec<usize> },
    #[error("empty or malformed label token {0:?}")]
    Token(String),
    #[error("unknown HOI id {0}")]
    UnknownHoi(u32),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing input from stage `{stage}`: {path} (run `{stage}` first)")]
    MissingInput { stage: &'static str, path: PathBuf },
    #[error("supervision cache mismatch: {0}")]
    Cache(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Error {
        let path = path.into();
        move |source| Error::Json { path, source }
    }
}
