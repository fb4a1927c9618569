use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;

use panelsim_core::store::{AuthError, StoreError};
use panelsim_core::ValidationReport;

use crate::manager::ManagerError;

#[derive(Debug)]
pub enum ApiError {
    Unauthorized,
    Forbidden(String),
    NotFound(String),
    Conflict(String),
    Invalid(ValidationReport),
    BadRequest(String),
    Internal(String),
}

impl ApiError {
    pub fn invalid(subject: &str, message: impl Into<String>) -> Self {
        let mut r = ValidationReport::new();
        r.push(subject, message);
        ApiError::Invalid(r)
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::Unauthorized => StatusCode::UNAUTHORIZED,
            ApiError::Forbidden(_) => StatusCode::FORBIDDEN,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            ApiError::Unauthorized => "unauthenticated",
            ApiError::Forbidden(_) => "forbidden",
            ApiError::NotFound(_) => "not-found",
            ApiError::Conflict(_) => "state-conflict",
            ApiError::Invalid(_) => "invalid",
            ApiError::BadRequest(_) => "bad-request",
            ApiError::Internal(_) => "internal",
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        let code = self.code();
        let body = match self {
            ApiError::Unauthorized => json!({ "error": code, "message": "authentication required" }),
            ApiError::Invalid(report) => json!({
                "error": code,
                "message": report.to_string(),
                "issues": report.issues,
            }),
            ApiError::Internal(msg) => {
                tracing::error!(%msg, "request failed");
                json!({ "error": code, "message": "internal error" })
            }
            ApiError::Forbidden(m) | ApiError::NotFound(m) | ApiError::Conflict(m) | ApiError::BadRequest(m) => {
                json!({ "error": code, "message": m })
            }
        };
        (status, Json(body)).into_response()
    }
}

impl From<ManagerError> for ApiError {
    fn from(e: ManagerError) -> Self {
        match e {
            ManagerError::NotFound(r) => ApiError::NotFound(format!("{r} not found")),
            ManagerError::Forbidden(r) => ApiError::Forbidden(format!("run {r} belongs to another user")),
            ManagerError::Conflict(m) => ApiError::Conflict(m),
            ManagerError::Invalid(r) => ApiError::Invalid(r),
            ManagerError::Store(e) => e.into(),
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(what) => ApiError::NotFound(format!("{what} not found")),
            StoreError::BadId(id) => ApiError::BadRequest(format!("invalid identifier {id:?}")),
            StoreError::Exists(what) => ApiError::Conflict(format!("{what} already exists")),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl From<AuthError> for ApiError {
    fn from(e: AuthError) -> Self {
        match e {
            AuthError::Denied => ApiError::Unauthorized,
            AuthError::Taken => ApiError::Conflict("login already registered".into()),
            AuthError::Invalid(m) => ApiError::invalid("credentials", m),
            AuthError::Store(e) => e.into(),
        }
    }
}
