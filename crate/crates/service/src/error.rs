use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Request};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use dxloop_core::consultation::ConsultationError;
use dxloop_core::gateway::GatewayError;
use dxloop_core::knowledge::KnowledgeError;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

/// Every error body is `{"error": {"code", "message", "detail"?}}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub detail: Option<Value>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            detail: None,
        }
    }

    pub fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("unknown {what} {id:?}"))
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", message)
    }

    pub fn busy(id: &str) -> Self {
        Self::new(
            StatusCode::TOO_MANY_REQUESTS,
            "turn_in_flight",
            format!("session {id:?} already has a turn in flight"),
        )
    }

    pub fn quarantined(id: &str, reason: &str) -> Self {
        Self::new(StatusCode::GONE, "session_quarantined", format!("session {id:?} is quarantined: {reason}"))
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    fn with_detail(mut self, detail: Value) -> Self {
        self.detail = Some(detail);
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut error = json!({ "code": self.code, "message": self.message });
        if let Some(d) = self.detail {
            error["detail"] = d;
        }
        (self.status, Json(json!({ "error": error }))).into_response()
    }
}

fn gateway_detail(e: &GatewayError) -> Value {
    match e {
        GatewayError::Transport { attempts, .. } => json!({ "kind": "transport", "attempts": attempts }),
        GatewayError::Http { status, attempts, .. } => json!({ "kind": "http", "status": status, "attempts": attempts }),
        GatewayError::Decode(_) => json!({ "kind": "decode" }),
        GatewayError::DimensionMismatch { expected, actual } => {
            json!({ "kind": "dimension_mismatch", "expected": expected, "actual": actual })
        }
        _ => json!({ "kind": "provider" }),
    }
}

impl From<ConsultationError> for ApiError {
    fn from(e: ConsultationError) -> Self {
        let message = e.to_string();
        match &e {
            ConsultationError::Precondition(_) => Self::invalid(message),
            ConsultationError::Concluded(_) => Self::new(StatusCode::CONFLICT, "session_concluded", message),
            ConsultationError::MalformedAction { .. } => {
                Self::new(StatusCode::BAD_GATEWAY, "malformed_action", message).with_detail(json!({ "kind": "malformed_action" }))
            }
            ConsultationError::Provider(g) => Self::new(StatusCode::BAD_GATEWAY, "upstream", message).with_detail(gateway_detail(g)),
            _ if e.is_upstream() => Self::new(StatusCode::BAD_GATEWAY, "upstream", message).with_detail(json!({ "kind": "embedding" })),
            _ => Self::internal(message),
        }
    }
}

impl From<KnowledgeError> for ApiError {
    fn from(e: KnowledgeError) -> Self {
        match e {
            KnowledgeError::Io { .. } => Self::internal(e.to_string()),
            other => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "knowledge", other.to_string()),
        }
    }
}

impl From<tokio::task::JoinError> for ApiError {
    fn from(e: tokio::task::JoinError) -> Self {
        Self::internal(format!("worker failed: {e}"))
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        Self::internal(format!("session log: {e}"))
    }
}

/// `Json` whose rejections are typed 422 bodies.
pub struct ApiJson<T>(pub T);

impl<S, T> FromRequest<S> for ApiJson<T>
where
    T: DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Self(v)),
            Err(r) => Err(rejection(r)),
        }
    }
}

fn rejection(r: JsonRejection) -> ApiError {
    ApiError::invalid(r.body_text())
}
