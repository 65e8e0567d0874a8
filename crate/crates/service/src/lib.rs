//! HTTP front end for [`droplab_core::jobs`].
//!
//! ```text
//! GET  /health
//! POST /v1/jobs          JobSpec -> 202 {"id": ...}
//! GET  /v1/jobs          all jobs, oldest first
//! GET  /v1/jobs/{id}     JobRecord
//! ```
//!
//! Jobs run on the blocking pool, at most `workers` at a time.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use droplab_core::jobs::{run_job, ErrorBody, JobRecord, JobSpec, JobState};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::Semaphore;
use uuid::Uuid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Submitted {
    pub id: Uuid,
}

#[derive(Default)]
struct Jobs {
    order: Vec<Uuid>,
    records: HashMap<Uuid, JobRecord>,
}

#[derive(Clone)]
pub struct AppState {
    jobs: Arc<Mutex<Jobs>>,
    permits: Arc<Semaphore>,
}

impl AppState {
    pub fn new(workers: usize) -> Self {
        AppState { jobs: Arc::default(), permits: Arc::new(Semaphore::new(workers.max(1))) }
    }

    fn update(&self, id: Uuid, f: impl FnOnce(&mut JobRecord)) {
        if let Some(r) = self.jobs.lock().expect("job table poisoned").records.get_mut(&id) {
            f(r);
        }
    }
}

impl Default for AppState {
    fn default() -> Self {
        AppState::new(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
    }
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError { status, body: ErrorBody { code: code.into(), message: message.into() } }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.body }))).into_response()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/jobs", get(list_jobs).post(submit))
        .route("/v1/jobs/{id}", get(get_job))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .with_state(state)
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

async fn submit(
    State(state): State<AppState>,
    body: Result<Json<JobSpec>, JsonRejection>,
) -> Result<(StatusCode, Json<Submitted>), ApiError> {
    let Json(spec) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text()))?;
    let id = Uuid::new_v4();
    let record = JobRecord {
        id: id.to_string(),
        command: spec.command().into(),
        state: JobState::Queued,
        result: None,
        error: None,
        elapsed_ms: None,
    };
    {
        let mut jobs = state.jobs.lock().expect("job table poisoned");
        jobs.order.push(id);
        jobs.records.insert(id, record);
    }
    tracing::info!(%id, command = spec.command(), "job queued");
    tokio::spawn(execute(state, id, spec));
    Ok((StatusCode::ACCEPTED, Json(Submitted { id })))
}

async fn execute(state: AppState, id: Uuid, spec: JobSpec) {
    let Ok(_permit) = state.permits.clone().acquire_owned().await else {
        return;
    };
    state.update(id, |r| r.state = JobState::Running);
    let start = Instant::now();
    let outcome = tokio::task::spawn_blocking(move || run_job(&spec)).await;
    let elapsed = start.elapsed().as_millis() as u64;
    state.update(id, |r| {
        r.elapsed_ms = Some(elapsed);
        match outcome {
            Ok(Ok(result)) => {
                r.state = JobState::Succeeded;
                r.result = Some(result);
            }
            Ok(Err(e)) => {
                r.state = JobState::Failed;
                r.error = Some(ErrorBody::from(&e));
            }
            Err(e) => {
                r.state = JobState::Failed;
                r.error = Some(ErrorBody { code: "internal".into(), message: e.to_string() });
            }
        }
    });
    tracing::info!(%id, elapsed_ms = elapsed, "job finished");
}

async fn list_jobs(State(state): State<AppState>) -> Json<Vec<JobRecord>> {
    let jobs = state.jobs.lock().expect("job table poisoned");
    Json(jobs.order.iter().filter_map(|id| jobs.records.get(id).cloned()).collect())
}

async fn get_job(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<JobRecord>, ApiError> {
    let id = Uuid::parse_str(&id).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.to_string()))?;
    let jobs = state.jobs.lock().expect("job table poisoned");
    jobs.records
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no job {id}")))
}

/// Serve on an already-bound listener until the future is dropped.
pub async fn serve(listener: TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// Bind `addr` and serve in the background; returns the bound address.
pub async fn spawn(addr: SocketAddr) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<std::io::Result<()>>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    Ok((local, tokio::spawn(serve(listener, AppState::default()))))
}
