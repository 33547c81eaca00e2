use axum::extract::rejection::JsonRejection;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::{json, Value};
use visitprep_core::engine::ErrorClass;
use visitprep_core::eventlog::EventLogError;
use visitprep_core::jobs::JobError;
use visitprep_core::SessionError;

/// Error body returned by every endpoint: `{code, message, details, retriable}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
    pub details: Value,
    pub retriable: bool,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            code: code.to_owned(),
            message: message.into(),
            details: Value::Null,
            retriable: false,
        }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = details;
        self
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidRequest", message)
    }

    pub fn not_found(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", message)
    }

    pub fn body(&self) -> Value {
        json!({
            "code": self.code,
            "message": self.message,
            "details": self.details,
            "retriable": self.retriable,
        })
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::warn!(code = %self.code, message = %self.message, "request failed");
        }
        (self.status, Json(self.body())).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let (status, retriable) = match e.class() {
            ErrorClass::Conflict => (StatusCode::CONFLICT, false),
            ErrorClass::Invalid => (StatusCode::UNPROCESSABLE_ENTITY, false),
            ErrorClass::Upstream => (StatusCode::BAD_GATEWAY, true),
            ErrorClass::Unavailable => (StatusCode::SERVICE_UNAVAILABLE, true),
            ErrorClass::Internal => (StatusCode::INTERNAL_SERVER_ERROR, false),
        };
        Self {
            status,
            code: e.code().to_owned(),
            message: e.to_string(),
            details: e.details(),
            retriable,
        }
    }
}

impl From<EventLogError> for ApiError {
    fn from(e: EventLogError) -> Self {
        match e {
            EventLogError::NotFound(_) | EventLogError::InvalidSessionId(_) => {
                ApiError::not_found("SessionNotFound", e.to_string())
            }
            EventLogError::CorruptEventLog { .. } => {
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "CorruptEventLog", e.to_string())
            }
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "StorageError", other.to_string()),
        }
    }
}

impl From<JobError> for ApiError {
    fn from(e: JobError) -> Self {
        match &e {
            JobError::BookBusy { job_id, .. } => {
                ApiError::new(StatusCode::CONFLICT, "BookBusy", e.to_string()).with_details(json!({ "job_id": job_id }))
            }
            JobError::InvalidBookId(_) => ApiError::invalid(e.to_string()),
            JobError::ShutDown => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "ShuttingDown", e.to_string()),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::invalid(e.body_text())
    }
}
