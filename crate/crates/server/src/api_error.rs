use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Codes the service adds on top of the engine's.
pub const SERVICE_CODES: &[&str] = &[
    "unknown_op",
    "bad_request",
    "not_found",
    "unsupported_format",
    "internal",
];

/// Every code a response body can carry.
pub fn published_codes() -> Vec<&'static str> {
    qdachain::Error::CODES
        .iter()
        .chain(SERVICE_CODES)
        .copied()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<Value>,
}

impl ApiError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            message: message.into(),
            detail: None,
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new("bad_request", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new("not_found", message)
    }

    pub fn status(&self) -> StatusCode {
        match self.code.as_str() {
            "unknown_session" | "unknown_unit" | "unknown_document" | "unknown_prompt"
            | "unknown_version" | "unknown_op" | "not_found" => StatusCode::NOT_FOUND,
            "busy"
            | "stage_not_committed"
            | "stale_upstream"
            | "stale_stage"
            | "precondition_failed"
            | "missing_summary"
            | "has_children" => StatusCode::CONFLICT,
            "bad_request" | "unsupported_format" => StatusCode::BAD_REQUEST,
            "provider_unreachable"
            | "provider_rejected"
            | "schema_violation"
            | "hallucinated_reference"
            | "duplicate_assignment"
            | "invalid_question_reference"
            | "unresolvable_reference"
            | "verbatim_violation"
            | "incomplete_coverage" => StatusCode::BAD_GATEWAY,
            "provider_timeout" => StatusCode::GATEWAY_TIMEOUT,
            "storage_failure" | "corrupt_log" | "template_error" | "unknown_schema"
            | "duplicate_schema" | "internal" => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        }
    }
}

impl From<qdachain::Error> for ApiError {
    fn from(e: qdachain::Error) -> Self {
        Self {
            code: e.code().into(),
            message: e.to_string(),
            detail: e.detail(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self)).into_response()
    }
}
