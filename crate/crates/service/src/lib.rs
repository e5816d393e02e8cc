//! JSON over HTTP for the consultation engine.
//!
//! Turns run one at a time per session; a second message while one is in
//! flight gets 429. Every completed turn is logged before it is answered,
//! so a restart restores exactly the completed turns.

pub mod api;
pub mod error;
pub mod log;
pub mod openapi;
pub mod state;

use axum::extract::{Request, State};
use axum::http::header;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use dxloop_core::config::{AppConfig, ConfigError};
use thiserror::Error;

pub use error::ApiError;
pub use log::ApiSession;
pub use state::{AppState, ServiceOptions};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("environment variable {0} holds no API key")]
    MissingApiKey(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/health", get(api::health))
        .route("/v1/openapi", get(api::openapi))
        .route("/v1/sessions", post(api::create_session))
        .route("/v1/sessions/{id}", get(api::get_session))
        .route("/v1/sessions/{id}/transcript", get(api::get_transcript))
        .route("/v1/sessions/{id}/messages", post(api::post_message))
        .route("/v1/sessions/{id}/finalize", post(api::finalize))
        .route("/v1/patients/{id}/sensors", post(api::ingest_sensors))
        .route("/v1/patients/{id}/consent", get(api::get_consent).put(api::put_consent))
        .route("/v1/patients/{id}/sensor-reads", get(api::sensor_reads))
        .route("/v1/kb/sync", post(api::kb_sync))
        .fallback(|| async { ApiError::new(axum::http::StatusCode::NOT_FOUND, "not_found", "no such route") })
        .layer(middleware::from_fn_with_state(state.clone(), require_key))
        .with_state(state)
}

async fn require_key(State(app): State<AppState>, req: Request, next: Next) -> Response {
    let Some(key) = app.api_key() else {
        return next.run(req).await;
    };
    if matches!(req.uri().path(), "/v1/health" | "/v1/openapi") {
        return next.run(req).await;
    }
    let headers = req.headers();
    let bearer = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    let plain = headers.get("x-api-key").and_then(|v| v.to_str().ok());
    if bearer == Some(key) || plain == Some(key) {
        next.run(req).await
    } else {
        ApiError::new(axum::http::StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong API key").into_response()
    }
}

/// State for `config`: engine, key from the environment and data directory.
pub fn state_from_config(config: &AppConfig) -> Result<AppState, ServiceError> {
    let api_key = match &config.server.api_key_env {
        Some(var) => match std::env::var(var) {
            Ok(k) if !k.is_empty() => Some(k),
            _ => return Err(ServiceError::MissingApiKey(var.clone())),
        },
        None => None,
    };
    let engine = config.engine()?;
    let options = ServiceOptions {
        data_dir: config.server.data_dir.clone(),
        api_key,
        compact_after: 0,
    };
    Ok(AppState::new(engine, options)?)
}

/// Serves until ctrl-c.
pub async fn serve(config: AppConfig) -> Result<(), ServiceError> {
    let listen = config.server.listen.clone();
    let state = tokio::task::spawn_blocking(move || state_from_config(&config))
        .await
        .map_err(|e| ServiceError::Io(std::io::Error::other(e)))??;
    let listener = tokio::net::TcpListener::bind(&listen).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
