//! HTTP routes over a registry of sessions.
//!
//! Each session sits behind a mutex holding an `Arc` snapshot: writers
//! check the status and swap in a new state under the lock, readers clone
//! the `Arc` and compute without it. Refits run on the blocking pool.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use alfd_core::control::RolloutMode;
use alfd_core::experiment::{ExperimentConfig, GridMode, PolicyKind};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;
use crate::session::{append_events, CreateRequest, DemoRequest, SessionState, SCHEMA_VERSION};

/// Seconds a client should wait before retrying a busy session.
pub const RETRY_AFTER_SECS: u64 = 1;

#[derive(Clone, Debug, Default)]
pub struct ServiceOptions {
    /// Directory of per-session event logs; no logs when absent.
    pub log_dir: Option<PathBuf>,
    /// Base configuration for sessions created without one.
    pub config: ExperimentConfig,
}

type Slot = Arc<Mutex<Arc<SessionState>>>;

#[derive(Clone)]
pub struct AppState {
    sessions: Arc<Mutex<HashMap<String, Slot>>>,
    next_id: Arc<AtomicU64>,
    options: Arc<ServiceOptions>,
}

impl AppState {
    pub fn new(options: ServiceOptions) -> Self {
        AppState { sessions: Arc::default(), next_id: Arc::new(AtomicU64::new(1)), options: Arc::new(options) }
    }

    fn fresh_id(&self) -> String {
        loop {
            let id = format!("s{}", self.next_id.fetch_add(1, Ordering::Relaxed));
            let logged = self.log_path(&id).is_some_and(|p| p.exists());
            if !logged && !self.sessions.lock().unwrap().contains_key(&id) {
                return id;
            }
        }
    }

    fn log_path(&self, id: &str) -> Option<PathBuf> {
        self.options.log_dir.as_ref().map(|d| d.join(format!("{id}.jsonl")))
    }

    fn slot(&self, id: &str) -> Result<Slot, ServiceError> {
        self.sessions.lock().unwrap().get(id).cloned().ok_or_else(|| ServiceError::NotFound(id.to_string()))
    }

    fn snapshot(&self, id: &str) -> Result<Arc<SessionState>, ServiceError> {
        Ok(self.slot(id)?.lock().unwrap().clone())
    }

    /// Applies `f` to a copy of the state; the copy replaces the state and
    /// its new events are logged only when `f` succeeds.
    fn mutate<T>(&self, id: &str, f: impl FnOnce(&mut SessionState) -> Result<T, ServiceError>) -> Result<T, ServiceError> {
        let slot = self.slot(id)?;
        let mut guard = slot.lock().unwrap();
        let mut next = (**guard).clone();
        let logged = next.events.len();
        let out = f(&mut next)?;
        if let Some(path) = self.log_path(id) {
            append_events(&path, &next.events[logged..])?;
        }
        *guard = Arc::new(next);
        Ok(out)
    }
}

#[derive(Serialize)]
struct ErrorBody {
    schema_version: u32,
    error: &'static str,
    message: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self {
            ServiceError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ServiceError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            ServiceError::Busy => (StatusCode::SERVICE_UNAVAILABLE, "busy"),
            ServiceError::Invalid(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid"),
            ServiceError::Core(alfd_core::Error::InvalidArgument(_) | alfd_core::Error::Config(_)) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "invalid")
            }
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        let body = Json(ErrorBody { schema_version: SCHEMA_VERSION, error: kind, message: self.to_string() });
        if matches!(self, ServiceError::Busy) {
            (status, [(header::RETRY_AFTER, RETRY_AFTER_SECS.to_string())], body).into_response()
        } else {
            (status, body).into_response()
        }
    }
}

type ApiResult<T> = Result<T, ServiceError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ServiceError::Internal(e.to_string()))?
}

async fn create_session(State(app): State<AppState>, body: Option<Json<CreateRequest>>) -> ApiResult<Response> {
    let mut request = body.map(|Json(b)| b).unwrap_or_default();
    if request.config.is_none() {
        request.config = Some(app.options.config.clone());
    }
    let id = app.fresh_id();
    let state = {
        let id = id.clone();
        blocking(move || SessionState::create(id, request)).await?
    };
    if let Some(path) = app.log_path(&id) {
        append_events(&path, &state.events)?;
    }
    let view = state.view();
    app.sessions.lock().unwrap().insert(id, Arc::new(Mutex::new(Arc::new(state))));
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn get_session(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let snap = app.snapshot(&id)?;
    Ok(Json(blocking(move || Ok(snap.view())).await?).into_response())
}

async fn request_query(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let out = blocking(move || app.mutate(&id, |s| s.request_query())).await?;
    Ok(Json(out).into_response())
}

async fn submit_demo(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(request): Json<DemoRequest>,
) -> ApiResult<Response> {
    let (job, accepted) = app.mutate(&id, |s| s.begin_demo(request))?;
    tokio::task::spawn_blocking(move || {
        let outcome = job.run();
        if let Ok(slot) = app.slot(&id) {
            let mut guard = slot.lock().unwrap();
            let mut next = (**guard).clone();
            next.finish_fit(outcome);
            *guard = Arc::new(next);
        }
    });
    Ok((StatusCode::ACCEPTED, Json(accepted)).into_response())
}

#[derive(Deserialize)]
struct GridParams {
    mode: Option<GridMode>,
    resolution: Option<usize>,
}

async fn grid(State(app): State<AppState>, Path(id): Path<String>, Query(p): Query<GridParams>) -> ApiResult<Response> {
    let snap = app.snapshot(&id)?;
    let view = blocking(move || snap.grid(p.mode.unwrap_or(GridMode::Epistemic), p.resolution)).await?;
    Ok(Json(view).into_response())
}

#[derive(Deserialize)]
struct RolloutParams {
    n: Option<usize>,
    mode: Option<RolloutMode>,
    policy: Option<PolicyKind>,
}

async fn rollouts(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(p): Query<RolloutParams>,
) -> ApiResult<Response> {
    let snap = app.snapshot(&id)?;
    let view = blocking(move || {
        snap.rollouts(p.n.unwrap_or(1), p.mode.unwrap_or(RolloutMode::Mean), p.policy.unwrap_or(PolicyKind::Poe))
    })
    .await?;
    Ok(Json(view).into_response())
}

async fn history(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(app.snapshot(&id)?.history()).into_response())
}

#[derive(Serialize)]
struct EventsView<'a> {
    schema_version: u32,
    events: &'a [crate::session::Event],
}

async fn events(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let snap = app.snapshot(&id)?;
    Ok(Json(EventsView { schema_version: SCHEMA_VERSION, events: &snap.events }).into_response())
}

pub fn router(app: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/query", post(request_query))
        .route("/sessions/{id}/demo", post(submit_demo))
        .route("/sessions/{id}/grid", get(grid))
        .route("/sessions/{id}/rollouts", get(rollouts))
        .route("/sessions/{id}/history", get(history))
        .route("/sessions/{id}/events", get(events))
        .with_state(app)
}

pub async fn serve(addr: SocketAddr, options: ServiceOptions) -> std::io::Result<()> {
    if let Some(dir) = &options.log_dir {
        std::fs::create_dir_all(dir)?;
    }
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(options))).await
}
