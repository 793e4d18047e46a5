use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("corrupt input at byte {offset}: {reason}")]
    CorruptInput { offset: usize, reason: String },

    #[error("scene {width}x{height} too small for {objects} objects")]
    SpecTooSmall {
        width: usize,
        height: usize,
        objects: usize,
    },

    #[error("image {image} has no label file {expected}")]
    MissingPair { image: PathBuf, expected: PathBuf },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("sample `{0}` has no ground truth")]
    MissingGroundTruth(String),

    #[error("sample `{0}` is not in the candidate pool")]
    NotCandidate(String),

    #[error("sample `{0}` already has a pending ticket")]
    DuplicateTicket(String),

    #[error("unknown ticket `{0}`")]
    UnknownTicket(String),

    #[error("ticket `{id}` is {status}, cannot {action}")]
    TicketConflict {
        id: String,
        status: String,
        action: String,
    },

    #[error("lease on ticket `{0}` has expired")]
    LeaseExpired(String),

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("depth missing for samples: {}", .0.join(", "))]
    MissingDepth(Vec<String>),

    #[error("schema mismatch: expected `{expected}`, found `{found}`")]
    Schema { expected: String, found: String },

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
