use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

use repforge_core::annotation::Violation;

use crate::store::TaskKind;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("missing or unknown bearer token")]
    Unauthorized,
    #[error("{0}")]
    BadRequest(String),
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("unknown clip {0}")]
    UnknownClip(String),
    #[error("no live lease on {0} for this rater")]
    StaleLease(String),
    #[error("{0} already has a submission from this rater or slot")]
    DuplicateSubmission(String),
    #[error("payload does not match task kind {expected:?}")]
    KindMismatch { expected: TaskKind },
    #[error("submission failed validation")]
    Validation(Vec<Violation>),
    #[error("{pending} clips are still waiting on raters")]
    NotFinalized { pending: usize },
    #[error("nothing to export")]
    EmptyStore,
    #[error("unsupported export format `{0}`")]
    UnsupportedFormat(String),
    #[error("clip media unavailable: {0}")]
    MediaUnavailable(String),
    #[error("service is shutting down")]
    Unavailable,
    #[error("storage: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Unauthorized => "unauthorized",
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::UnknownTask(_) => "unknown_task",
            ServiceError::UnknownClip(_) => "unknown_clip",
            ServiceError::StaleLease(_) => "stale_lease",
            ServiceError::DuplicateSubmission(_) => "duplicate_submission",
            ServiceError::KindMismatch { .. } => "kind_mismatch",
            ServiceError::Validation(_) => "validation_failed",
            ServiceError::NotFinalized { .. } => "not_finalized",
            ServiceError::EmptyStore => "empty_store",
            ServiceError::UnsupportedFormat(_) => "unsupported_format",
            ServiceError::MediaUnavailable(_) => "media_unavailable",
            ServiceError::Unavailable => "unavailable",
            ServiceError::Io(_) | ServiceError::Internal(_) => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::Unauthorized => StatusCode::UNAUTHORIZED,
            ServiceError::BadRequest(_) | ServiceError::UnsupportedFormat(_) => StatusCode::BAD_REQUEST,
            ServiceError::UnknownTask(_) | ServiceError::UnknownClip(_) | ServiceError::MediaUnavailable(_) => {
                StatusCode::NOT_FOUND
            }
            ServiceError::StaleLease(_)
            | ServiceError::DuplicateSubmission(_)
            | ServiceError::NotFinalized { .. }
            | ServiceError::EmptyStore => StatusCode::CONFLICT,
            ServiceError::KindMismatch { .. } | ServiceError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Unavailable => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Io(_) | ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Serialize)]
struct FieldError<'a> {
    field: &'a str,
    rule: &'a str,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    code: &'a str,
    message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    fields: Vec<FieldError<'a>>,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        if matches!(self, ServiceError::Io(_) | ServiceError::Internal(_)) {
            tracing::error!("{self}");
        }
        let fields = match &self {
            ServiceError::Validation(v) => v
                .iter()
                .map(|v| FieldError {
                    field: &v.field,
                    rule: &v.rule,
                })
                .collect(),
            _ => Vec::new(),
        };
        let body = ErrorBody {
            code: self.code(),
            message: self.to_string(),
            fields,
        };
        let json = serde_json::json!({ "error": body });
        (self.status(), Json(json)).into_response()
    }
}
