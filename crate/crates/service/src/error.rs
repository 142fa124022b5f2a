use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use iharmon_core::Error as CoreError;
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    /// Malformed or oversized request.
    #[error("{0}")]
    BadRequest(String),
    /// Well-formed request whose content cannot be processed.
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Unavailable(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::EmptyRegion
            | CoreError::EmptyReferenceRegion
            | CoreError::ReferenceTooSmall { .. }
            | CoreError::ShapeMismatch(_)
            | CoreError::InvalidArgument(_) => ApiError::Unprocessable(e.to_string()),
            CoreError::Codec(_) => ApiError::BadRequest(e.to_string()),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if let ApiError::Internal(msg) = &self {
            log::error!("request failed: {msg}");
        }
        (self.status(), Json(json!({ "error": self.to_string() }))).into_response()
    }
}
