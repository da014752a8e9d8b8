//! HTTP render service.
//!
//! - `GET /info`: model dimensions, joint names, canonical pose and the
//!   checkpoint hash.
//! - `POST /render`: a render request as JSON, answered with PNG bytes.
//! - `GET /healthz`: liveness.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use crate::avatar::{Avatar, RenderRequest};

pub struct AppState {
    pub avatar: Avatar,
    /// Bounds the number of renders in flight; further requests wait.
    pub permits: Semaphore,
}

pub fn router(avatar: Avatar, max_concurrency: usize) -> Router {
    let state = Arc::new(AppState {
        avatar,
        permits: Semaphore::new(max_concurrency.max(1)),
    });
    Router::new()
        .route("/info", get(info))
        .route("/render", post(render))
        .route("/healthz", get(|| async { "ok" }))
        .with_state(state)
}

async fn info(State(s): State<Arc<AppState>>) -> Json<Value> {
    Json(s.avatar.info())
}

fn bad_request(field: &str, message: String) -> Response {
    (StatusCode::BAD_REQUEST, Json(json!({ "error": message, "field": field }))).into_response()
}

async fn render(State(s): State<Arc<AppState>>, body: Bytes) -> Response {
    let value: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return bad_request("body", format!("malformed JSON: {e}")),
    };
    let req = match RenderRequest::from_json(&value) {
        Ok(r) => r,
        Err(e) => return bad_request(&e.field, e.to_string()),
    };
    let Ok(_permit) = s.permits.acquire().await else {
        return (StatusCode::SERVICE_UNAVAILABLE, "shutting down").into_response();
    };
    let worker = s.clone();
    let result = tokio::task::spawn_blocking(move || worker.avatar.render_png(&req)).await;
    match result {
        Ok(Ok(png)) => ([(header::CONTENT_TYPE, "image/png")], png).into_response(),
        Ok(Err(e)) => internal_error(&e.to_string()),
        Err(e) => internal_error(&format!("render task failed: {e}")),
    }
}

fn internal_error(message: &str) -> Response {
    let incident = uuid::Uuid::new_v4().to_string();
    log::error!("render failed [{incident}]: {message}");
    (
        StatusCode::INTERNAL_SERVER_ERROR,
        Json(json!({ "error": message, "incident": incident })),
    )
        .into_response()
}

/// Serve until the process is stopped.
pub async fn serve(avatar: Avatar, bind: &str, max_concurrency: usize) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(avatar, max_concurrency)).await
}
