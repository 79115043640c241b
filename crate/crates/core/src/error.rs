use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Invalid configuration or arguments (empty class filter, double
    /// classifier extension, bad preset name, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or incompatible data (bad manifest, unknown class id,
    /// checkpoint class-count mismatch, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Tensor or image shape mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// A loss or statistic became non-finite.
    #[error("numerical failure in {component}{}", iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    Numerical {
        component: String,
        iteration: Option<u64>,
    },

    /// Zero-length vector where a direction or length ratio is required.
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        CoreError::Json {
            path: path.into(),
            source,
        }
    }

    pub fn numerical(component: impl Into<String>, iteration: Option<u64>) -> Self {
        CoreError::Numerical {
            component: component.into(),
            iteration,
        }
    }
}
