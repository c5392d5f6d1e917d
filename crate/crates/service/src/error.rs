use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;

use embmapper_core::agents::AgentError;
use embmapper_core::dataset::DatasetError;
use embmapper_core::mapper::MapperError;
use embmapper_core::projection::ProjectionError;
use embmapper_core::trajectory::TrajectoryError;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    /// Well-formed request that names something invalid.
    #[error("{0}")]
    Unprocessable(String),
    #[error("provider failure: {0}")]
    Provider(String),
    #[error("{0}")]
    Internal(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad configuration: {0}")]
    Config(String),
}

impl ServiceError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            Self::NotFound(_) => StatusCode::NOT_FOUND,
            Self::BadRequest(_) => StatusCode::BAD_REQUEST,
            Self::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Self::Provider(_) => StatusCode::BAD_GATEWAY,
            Self::Internal(_) | Self::Io { .. } | Self::Config(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({ "error": self.to_string() }))).into_response()
    }
}

impl From<MapperError> for ServiceError {
    fn from(e: MapperError) -> Self {
        match e {
            MapperError::Dataset(d) => d.into(),
            MapperError::UnknownNode(_) | MapperError::UnknownComponent(_) => Self::NotFound(e.to_string()),
            other => Self::Unprocessable(other.to_string()),
        }
    }
}

impl From<DatasetError> for ServiceError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::UnknownLayer(_) | DatasetError::UnknownPoint(_) => Self::NotFound(e.to_string()),
            other => Self::Unprocessable(other.to_string()),
        }
    }
}

impl From<AgentError> for ServiceError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::Mapper(m) => m.into(),
            AgentError::Dataset(d) => d.into(),
            e if e.is_provider() => Self::Provider(e.to_string()),
            AgentError::Cache(m) => Self::Internal(m),
            other => Self::Unprocessable(other.to_string()),
        }
    }
}

impl From<TrajectoryError> for ServiceError {
    fn from(e: TrajectoryError) -> Self {
        match e {
            TrajectoryError::Agent(a) => a.into(),
            TrajectoryError::Dataset(d) => d.into(),
            other => Self::Unprocessable(other.to_string()),
        }
    }
}

impl From<ProjectionError> for ServiceError {
    fn from(e: ProjectionError) -> Self {
        match e {
            ProjectionError::File { .. } => Self::Internal(e.to_string()),
            other => Self::Unprocessable(other.to_string()),
        }
    }
}
