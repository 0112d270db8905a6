//! Loopback HTTP binding for the session service.
//!
//! | method | path                    | body                  | answer                 |
//! |--------|-------------------------|-----------------------|------------------------|
//! | POST   | `/session/start`        | `StartSessionRequest` | `StartSessionResponse` |
//! | POST   | `/session/{id}/respond` | `StepInput`           | `RespondResponse`      |
//! | POST   | `/session/{id}/close`   | `CloseRequest`        | `CloseResponse`        |
//! | GET    | `/progress?window=N`    |                       | `ProgressResponse`     |
//! | POST   | `/export/consent`       |                       | `ConsentChallenge`     |
//! | POST   | `/export`               | `ExportRequest`       | `ExportResponse`       |
//! | GET    | `/healthz`              |                       | `Health`               |
//!
//! Errors answer `{"status", "code", "message"}` with the matching status.

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mindgap_core::service::{
    ensure_loopback, ApiError, CloseRequest, ExportRequest, ServiceError, SessionService, StartSessionRequest,
};
use mindgap_core::StepInput;
use serde::Deserialize;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard};

/// One patient, one service. Requests are serialised through the lock, which
/// also serialises the store writer.
pub type Shared = Arc<Mutex<SessionService>>;

pub struct HttpError(ApiError);

impl From<ApiError> for HttpError {
    fn from(e: ApiError) -> Self {
        Self(e)
    }
}

impl IntoResponse for HttpError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        if status == StatusCode::NO_CONTENT {
            return status.into_response();
        }
        (status, Json(self.0)).into_response()
    }
}

type Reply<T> = Result<Json<T>, HttpError>;

fn lock(state: &Shared) -> MutexGuard<'_, SessionService> {
    // A panicked handler leaves nothing half-written: events are persisted
    // before state is swapped in.
    state.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

pub fn router(service: SessionService) -> Router {
    router_shared(Arc::new(Mutex::new(service)))
}

pub fn router_shared(state: Shared) -> Router {
    Router::new()
        .route("/session/start", post(start))
        .route("/session/{id}/respond", post(respond))
        .route("/session/{id}/close", post(close))
        .route("/progress", get(progress))
        .route("/export/consent", post(consent))
        .route("/export", post(export))
        .route("/healthz", get(health))
        .with_state(state)
}

async fn start(State(s): State<Shared>, Json(req): Json<StartSessionRequest>) -> Reply<impl serde::Serialize> {
    Ok(Json(lock(&s).handle_start(req)?))
}

async fn respond(State(s): State<Shared>, Path(id): Path<String>, Json(input): Json<StepInput>) -> Reply<impl serde::Serialize> {
    Ok(Json(lock(&s).handle_respond(&id, input)?))
}

async fn close(State(s): State<Shared>, Path(id): Path<String>, Json(req): Json<CloseRequest>) -> Reply<impl serde::Serialize> {
    Ok(Json(lock(&s).handle_close(&id, req)?))
}

#[derive(Debug, Deserialize)]
struct ProgressQuery {
    window: Option<u32>,
}

async fn progress(State(s): State<Shared>, Query(q): Query<ProgressQuery>) -> Reply<impl serde::Serialize> {
    Ok(Json(lock(&s).handle_progress(q.window)?))
}

async fn consent(State(s): State<Shared>) -> Json<impl serde::Serialize> {
    Json(lock(&s).handle_consent_request())
}

async fn export(State(s): State<Shared>, Json(req): Json<ExportRequest>) -> Reply<impl serde::Serialize> {
    Ok(Json(lock(&s).handle_export(req)?))
}

async fn health(State(s): State<Shared>) -> Json<impl serde::Serialize> {
    Json(lock(&s).health())
}

/// Binds `addr` after checking it is a loopback address, then serves until
/// ctrl-c.
pub async fn serve(addr: &str, service: SessionService) -> anyhow::Result<()> {
    let addr: SocketAddr = ensure_loopback(addr)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    serve_on(listener, service).await
}

pub async fn serve_on(listener: tokio::net::TcpListener, service: SessionService) -> anyhow::Result<()> {
    let local = listener.local_addr()?;
    if !local.ip().is_loopback() {
        return Err(ServiceError::NonLoopbackBind(local.to_string()).into());
    }
    eprintln!("mindgap listening on http://{local}");
    axum::serve(listener, router(service))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
