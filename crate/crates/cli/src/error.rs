use std::sync::atomic::{AtomicU64, Ordering};

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use sanerf_core::Error as CoreError;
use serde::Serialize;

static DIAGNOSTICS: AtomicU64 = AtomicU64::new(1);

/// Failure sent as `{"error": {code, message, diagnosticId?}}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostic_id: Option<String>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            diagnostic_id: None,
        }
    }

    pub fn malformed(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "malformed_body", message)
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", message)
    }

    pub fn no_mesh() -> Self {
        Self::new(
            StatusCode::CONFLICT,
            "no_mesh",
            "no mesh is attached to this session; restart the service with mesh extraction enabled",
        )
    }

    /// A server-side failure, logged under a fresh diagnostic id.
    pub fn internal(message: impl Into<String>) -> Self {
        let id = format!("diag-{:06}", DIAGNOSTICS.fetch_add(1, Ordering::Relaxed));
        let message = message.into();
        log::error!("{id}: {message}");
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            message,
            diagnostic_id: Some(id),
        }
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Contract(_) => Self::invalid(e.to_string()),
            CoreError::UnknownPrompt { .. } => Self::new(StatusCode::NOT_FOUND, "unknown_prompt", e.to_string()),
            CoreError::WrongTeacher(_) => Self::new(StatusCode::CONFLICT, "wrong_teacher", e.to_string()),
            CoreError::EmptySelection => Self::new(StatusCode::CONFLICT, "empty_selection", e.to_string()),
            other => Self::internal(other.to_string()),
        }
    }
}

#[derive(Serialize)]
struct Envelope<'a> {
    error: &'a ApiError,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(Envelope { error: &self })).into_response()
    }
}
