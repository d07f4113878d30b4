use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("malformed mask: {0}")]
    MalformedMask(String),
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("invalid depth {0}")]
    InvalidDepth(f64),
    #[error("object point cloud is empty")]
    EmptyCloud,
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("malformed decomposition: {0}")]
    MalformedDecomposition(String),
    #[error("invalid decomposition: {0}")]
    InvalidDecomposition(String),
    #[error("malformed segmentation response: {0}")]
    MalformedSegmentation(String),
    #[error("no segment returned for object {0:?}")]
    NoObjectSegment(String),
    #[error("no grasp candidates")]
    NoCandidates,
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("fixture error: {0}")]
    Fixture(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }
}
