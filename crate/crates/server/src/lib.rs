//! HTTP/JSON front end over the training, evaluation and analysis operations.
//!
//! Long training runs execute on blocking worker threads as jobs; clients
//! poll their status and metrics and fetch the final checkpoint.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use atpo_core::api::{
    ErrorBody, ErrorKind, EvaluateRequest, EvaluateResponse, JobState, JobStatus, SampleTreeRequest, SampleTreeResponse, TrainAccepted,
    TrainRequest,
};
use atpo_core::model::Checkpoint;
use atpo_core::runner::{
    evaluate_checkpoint, ingest_str, sample_tree, train_with_cancel, ComputeProfile, FlopsReport, MetricsRow, RunConfig, RunError,
};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tokio::net::TcpListener;

pub struct ApiError(StatusCode, ErrorBody);

impl ApiError {
    fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        ApiError(status_of(kind), ErrorBody::new(kind, message))
    }
}

fn status_of(kind: ErrorKind) -> StatusCode {
    match kind {
        ErrorKind::Config => StatusCode::BAD_REQUEST,
        ErrorKind::Input => StatusCode::UNPROCESSABLE_ENTITY,
        ErrorKind::NotFound => StatusCode::NOT_FOUND,
        ErrorKind::Cancelled => StatusCode::CONFLICT,
        ErrorKind::Numeric | ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<RunError> for ApiError {
    fn from(e: RunError) -> Self {
        let body = ErrorBody::from(&e);
        ApiError(status_of(body.kind), body)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

struct Job {
    status: JobStatus,
    metrics: Vec<MetricsRow>,
    checkpoint: Option<Checkpoint>,
    cancel: Arc<AtomicBool>,
}

#[derive(Default)]
pub struct AppState {
    jobs: Mutex<BTreeMap<u64, Job>>,
    next_job: AtomicU64,
}

impl AppState {
    fn with_job<T>(&self, id: u64, f: impl FnOnce(&mut Job) -> T) -> Result<T, ApiError> {
        let mut jobs = self.jobs.lock().expect("job table poisoned");
        jobs.get_mut(&id).map(f).ok_or_else(|| ApiError::new(ErrorKind::NotFound, format!("no job {id}")))
    }
}

pub fn router() -> Router {
    router_with_state(Arc::new(AppState::default()))
}

pub fn router_with_state(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/v1/flops", post(flops))
        .route("/v1/sample-tree", post(sample_tree_handler))
        .route("/v1/evaluate", post(evaluate))
        .route("/v1/train", post(train))
        .route("/v1/jobs/{id}", get(job_status).delete(cancel_job))
        .route("/v1/jobs/{id}/metrics", get(job_metrics))
        .route("/v1/jobs/{id}/checkpoint", get(job_checkpoint))
        .with_state(state)
}

pub async fn serve(listener: TcpListener) -> std::io::Result<()> {
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router()).await
}

fn parse_config(text: &str) -> Result<RunConfig, ApiError> {
    RunConfig::parse(text).map_err(ApiError::from)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, RunError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(ErrorKind::Internal, format!("worker failed: {e}")))?
        .map_err(ApiError::from)
}

async fn flops(Json(profile): Json<ComputeProfile>) -> Json<FlopsReport> {
    Json(profile.report())
}

async fn sample_tree_handler(Json(req): Json<SampleTreeRequest>) -> ApiResult<SampleTreeResponse> {
    let config = parse_config(&req.config)?;
    let (tree, report) = blocking(move || sample_tree(&config, req.seed, req.checkpoint.as_ref())).await?;
    Ok(Json(SampleTreeResponse { tree: tree.dump(), report }))
}

async fn evaluate(Json(req): Json<EvaluateRequest>) -> ApiResult<EvaluateResponse> {
    let ingested = ingest_str(&req.scenarios);
    if ingested.scenarios.is_empty() {
        return Err(ApiError::new(ErrorKind::Input, format!("no usable scenarios: {}", ingested.summary())));
    }
    let issues = ingested.issues.clone();
    let summary =
        blocking(move || evaluate_checkpoint(&req.checkpoint, &ingested.scenarios, req.runs, req.temperature, req.seed, req.env)).await?;
    Ok(Json(EvaluateResponse { summary, issues }))
}

async fn train(State(state): State<Arc<AppState>>, Json(req): Json<TrainRequest>) -> Result<(StatusCode, Json<TrainAccepted>), ApiError> {
    let config = parse_config(&req.config)?;
    let id = state.next_job.fetch_add(1, Ordering::Relaxed);
    let cancel = Arc::new(AtomicBool::new(false));
    let status = JobStatus {
        job: id,
        state: JobState::Running,
        steps_done: 0,
        steps_total: config.steps,
        latest: None,
        final_eval: None,
        error: None,
    };
    state
        .jobs
        .lock()
        .expect("job table poisoned")
        .insert(id, Job { status, metrics: Vec::new(), checkpoint: None, cancel: cancel.clone() });
    tracing::info!(job = id, algorithm = config.algorithm.name(), steps = config.steps, "training started");

    let worker = state.clone();
    tokio::task::spawn_blocking(move || {
        let on_row = |row: &MetricsRow| {
            worker
                .with_job(id, |job| {
                    job.status.steps_done = row.step + 1;
                    job.status.latest = Some(row.clone());
                    job.metrics.push(row.clone());
                })
                .ok();
        };
        let outcome = train_with_cancel(&config, on_row, Some(&cancel));
        worker
            .with_job(id, |job| match outcome {
                Ok(out) => {
                    job.status.state = JobState::Succeeded;
                    job.status.final_eval = Some(out.final_eval);
                    job.checkpoint = Some(out.checkpoint);
                }
                Err(e) => {
                    job.status.state = if matches!(e, RunError::Cancelled) { JobState::Cancelled } else { JobState::Failed };
                    job.status.error = Some(ErrorBody::from(&e));
                }
            })
            .ok();
        tracing::info!(job = id, "training finished");
    });
    Ok((StatusCode::ACCEPTED, Json(TrainAccepted { job: id })))
}

async fn job_status(State(state): State<Arc<AppState>>, Path(id): Path<u64>) -> ApiResult<JobStatus> {
    state.with_job(id, |job| job.status.clone()).map(Json)
}

async fn cancel_job(State(state): State<Arc<AppState>>, Path(id): Path<u64>) -> ApiResult<JobStatus> {
    state
        .with_job(id, |job| {
            job.cancel.store(true, Ordering::Relaxed);
            job.status.clone()
        })
        .map(Json)
}

#[derive(Debug, Deserialize)]
struct MetricsQuery {
    #[serde(default)]
    from: usize,
}

/// Rows from index `from` on, so pollers can fetch only what is new.
async fn job_metrics(State(state): State<Arc<AppState>>, Path(id): Path<u64>, Query(q): Query<MetricsQuery>) -> ApiResult<Vec<MetricsRow>> {
    state.with_job(id, |job| job.metrics.get(q.from..).unwrap_or_default().to_vec()).map(Json)
}

async fn job_checkpoint(State(state): State<Arc<AppState>>, Path(id): Path<u64>) -> ApiResult<Checkpoint> {
    state
        .with_job(id, |job| job.checkpoint.clone())?
        .map(Json)
        .ok_or_else(|| ApiError::new(ErrorKind::NotFound, format!("job {id} has no checkpoint (still running or failed)")))
}
