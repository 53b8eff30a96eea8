use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use thiserror::Error;
use vizproto_core::CoreError;
use vizproto_pipeline::{AssetGap, PipelineError};

#[derive(Debug, Error)]
pub enum ApiError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("missing or invalid bearer token")]
    Unauthorized,
    #[error("background task failed: {0}")]
    Task(String),
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        ApiError::Pipeline(e.into())
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: String,
    kind: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    gaps: Option<&'a [AssetGap]>,
}

impl ApiError {
    fn status_and_kind(&self) -> (StatusCode, &'static str) {
        use PipelineError as P;
        match self {
            ApiError::Unauthorized => (StatusCode::UNAUTHORIZED, "unauthorized"),
            ApiError::Task(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
            ApiError::Pipeline(e) => match e {
                P::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
                P::Invalid(_) | P::Core(CoreError::UnknownBackend(_)) | P::Core(CoreError::Domain(_)) => {
                    (StatusCode::BAD_REQUEST, "invalid")
                }
                P::MissingAssets(_) => (StatusCode::UNPROCESSABLE_ENTITY, "missing_assets"),
                P::Core(CoreError::EmptyPrototype { .. }) => (StatusCode::UNPROCESSABLE_ENTITY, "empty_prototype"),
                P::Llm(_) | P::Generation(_) => (StatusCode::BAD_GATEWAY, "upstream"),
                _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = self.status_and_kind();
        if status.is_server_error() {
            log::error!("{self}");
        }
        let gaps = match &self {
            ApiError::Pipeline(PipelineError::MissingAssets(g)) => Some(g.as_slice()),
            _ => None,
        };
        let body = ErrorBody {
            error: self.to_string(),
            kind,
            gaps,
        };
        (status, Json(body)).into_response()
    }
}
