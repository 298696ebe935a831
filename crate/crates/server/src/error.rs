use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use echo_core::flow::FlowError;
use echo_core::log::LogError;
use echo_core::model::ValidationReport;
use echo_core::provider::{CredentialError, ProviderError};
use echo_core::store::StoreError;
use serde_json::{json, Value};

/// An error as sent to clients: a status, a stable code and a message,
/// plus optional structured detail.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub detail: Option<Value>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into(), detail: None }
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.detail = Some(detail);
        self
    }

    pub fn unauthorized() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or expired bearer token")
    }

    pub fn forbidden() -> Self {
        Self::new(StatusCode::FORBIDDEN, "forbidden", "this endpoint needs a different kind of account")
    }

    pub fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", what)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", message)
    }

    pub fn wrong_step(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "wrong_step", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    pub fn validation(report: &ValidationReport) -> Self {
        let issues = serde_json::to_value(&report.issues).unwrap_or(Value::Null);
        Self::invalid("study configuration is invalid").with_detail(json!({ "issues": issues }))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.code, "message": self.message });
        if let Some(Value::Object(extra)) = self.detail {
            body.as_object_mut().expect("body is an object").extend(extra);
        }
        (self.status, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::VersionConflict { .. } => ApiError::conflict(e.to_string()),
            StoreError::InvalidKey(_) => ApiError::bad_request(e.to_string()),
            _ => ApiError::internal(e.to_string()),
        }
    }
}

impl From<LogError> for ApiError {
    fn from(e: LogError) -> Self {
        match e {
            LogError::Storage(s) => s.into(),
            LogError::Corrupt(_) => ApiError::internal(e.to_string()),
            LogError::UnknownSession(_) => ApiError::not_found(e.to_string()),
            LogError::SessionClosed(_) => ApiError::conflict(e.to_string()),
            _ => ApiError::invalid(e.to_string()),
        }
    }
}

impl From<FlowError> for ApiError {
    fn from(e: FlowError) -> Self {
        match &e {
            FlowError::Gate { reason, detail } => {
                ApiError::new(StatusCode::CONFLICT, "gate", e.to_string())
                    .with_detail(json!({ "reason": reason.as_str(), "detail": detail }))
            }
            FlowError::WrongStep { .. } | FlowError::SessionComplete => ApiError::wrong_step(e.to_string()),
            FlowError::InvalidAnswer { .. } => ApiError::invalid(e.to_string()),
            FlowError::DuplicateSession => ApiError::conflict(e.to_string()),
            FlowError::UnknownSurvey(_) | FlowError::UnknownTask(_) => ApiError::internal(e.to_string()),
        }
    }
}

impl From<ProviderError> for ApiError {
    fn from(e: ProviderError) -> Self {
        ApiError::new(StatusCode::BAD_GATEWAY, "provider_unavailable", e.to_string())
    }
}

impl From<CredentialError> for ApiError {
    fn from(e: CredentialError) -> Self {
        match e {
            CredentialError::InvalidRef(_) => ApiError::bad_request(e.to_string()),
            CredentialError::Decrypt(_) => ApiError::internal(e.to_string()),
            CredentialError::Storage(s) => s.into(),
        }
    }
}
