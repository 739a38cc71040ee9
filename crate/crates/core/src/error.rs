use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::backend::BackendError;
use crate::codec::CodecError;
use crate::dataset::DatasetError;
use crate::ontology::OntologyError;
use crate::pools::PoolError;
use crate::prompt::PromptError;
use crate::refine::RefineError;
use crate::sampler::SampleError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn parse(path: &Path, source: serde_json::Error) -> Self {
        Error::Parse {
            path: path.to_path_buf(),
            source,
        }
    }

    /// The backend failed at run time (as opposed to being misconfigured).
    pub fn is_backend_failure(&self) -> bool {
        let backend = match self {
            Error::Backend(e) => Some(e),
            Error::Pool(PoolError::Backend(e)) => Some(e),
            Error::Refine(RefineError::Backend(e)) => Some(e),
            _ => None,
        };
        backend.is_some_and(|e| !e.is_config())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
