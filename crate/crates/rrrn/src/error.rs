use std::path::PathBuf;

use rrrn_core::augment::AugmentError;
use rrrn_core::dataset::ManifestError;
use rrrn_core::flow::FlowError;
use rrrn_core::nn::NnError;
use rrrn_core::occlusion::OcclusionError;
use rrrn_core::protocol::ProtocolError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: ManifestError,
    },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("usage: {0}")]
    Usage(String),
    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },
    #[error("sample `{sample_id}`: {reason}")]
    Sample { sample_id: String, reason: String },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Occlusion(#[from] OcclusionError),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("report JSON: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code: 2 for usage errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| {
            if source.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path)
            } else {
                Error::Io { path, source }
            }
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Error {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
