//! HTTP/JSON front end for training, evaluation and embedding.
//!
//! | method | path            | body / response                    |
//! |--------|-----------------|------------------------------------|
//! | GET    | `/health`       | [`Health`]                         |
//! | POST   | `/v1/train`     | [`TrainRequest`] → 202 [`JobCreated`] |
//! | GET    | `/v1/jobs/{id}` | [`JobStatus`]                      |
//! | DELETE | `/v1/jobs/{id}` | cancels; [`JobStatus`]             |
//! | POST   | `/v1/eval`      | [`EvalRequest`] → [`EvalResponse`] |
//! | POST   | `/v1/embed`     | [`EmbedRequest`] → [`EmbedResponse`] |
//!
//! Errors come back as [`ApiError`] with a matching status code. Compute
//! runs on tokio's blocking pool; training runs as a background job.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::net::TcpListener;

use catstyle_core::api::{
    request_config, run_embed, run_eval, run_train, ApiError, EmbedRequest, EmbedResponse, ErrorKind,
    EvalRequest, EvalResponse, Health, JobCreated, JobState, JobStatus, TrainRequest,
};
use catstyle_core::Error;

struct Job {
    status: Arc<Mutex<JobStatus>>,
    cancel: Arc<AtomicBool>,
}

#[derive(Default)]
pub struct AppState {
    jobs: Mutex<HashMap<u64, Job>>,
    next_id: AtomicU64,
}

/// [`ApiError`] carried through axum handlers.
pub struct HttpError(pub ApiError);

impl From<ApiError> for HttpError {
    fn from(e: ApiError) -> Self {
        HttpError(e)
    }
}

impl From<Error> for HttpError {
    fn from(e: Error) -> Self {
        HttpError(e.into())
    }
}

impl From<JsonRejection> for HttpError {
    fn from(e: JsonRejection) -> Self {
        HttpError(ApiError::new(ErrorKind::InvalidRequest, e.body_text()))
    }
}

pub fn status_code(kind: ErrorKind) -> StatusCode {
    match kind {
        ErrorKind::InvalidRequest => StatusCode::BAD_REQUEST,
        ErrorKind::NotFound => StatusCode::NOT_FOUND,
        ErrorKind::ArchitectureMismatch => StatusCode::CONFLICT,
        ErrorKind::BadData | ErrorKind::NonFinite => StatusCode::UNPROCESSABLE_ENTITY,
        ErrorKind::Cancelled => StatusCode::GONE,
        ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for HttpError {
    fn into_response(self) -> Response {
        (status_code(self.0.kind), Json(self.0)).into_response()
    }
}

type HttpResult<T> = Result<Json<T>, HttpError>;

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> catstyle_core::Result<T> + Send + 'static,
) -> Result<T, HttpError> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(HttpError::from),
        Err(e) => Err(HttpError(ApiError::new(
            ErrorKind::Internal,
            format!("worker failed: {e}"),
        ))),
    }
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

async fn start_train(
    State(state): State<Arc<AppState>>,
    body: Result<Json<TrainRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<JobCreated>), HttpError> {
    let Json(req) = body?;
    let cfg = request_config(&req.config_toml, req.seed)?;
    let id = state.next_id.fetch_add(1, Ordering::Relaxed) + 1;
    let hash = cfg.hash();
    let status = Arc::new(Mutex::new(JobStatus {
        job_id: id,
        state: JobState::Running,
        config_hash: hash.clone(),
        total_steps: cfg.total_encoder_steps,
        log: Vec::new(),
        result: None,
        error: None,
    }));
    let cancel = Arc::new(AtomicBool::new(false));
    state.jobs.lock().unwrap().insert(
        id,
        Job {
            status: status.clone(),
            cancel: cancel.clone(),
        },
    );
    log::info!("job {id}: training config {hash} into {}", req.out_dir.display());
    let total = cfg.total_encoder_steps;
    tokio::task::spawn_blocking(move || {
        let progress = status.clone();
        let out = run_train(
            &cfg,
            &req.out_dir,
            req.strict_deterministic,
            Some(cancel),
            Some(Box::new(move |r| progress.lock().unwrap().log.push(r.clone()))),
        );
        let mut s = status.lock().unwrap();
        match out {
            Ok(summary) => {
                s.state = JobState::Succeeded;
                s.result = Some(summary);
            }
            Err(e) => {
                log::warn!("job {id} ended: {e}");
                s.state = if matches!(e, Error::Cancelled(_)) {
                    JobState::Cancelled
                } else {
                    JobState::Failed
                };
                s.error = Some(e.into());
            }
        }
    });
    Ok((
        StatusCode::ACCEPTED,
        Json(JobCreated {
            job_id: id,
            config_hash: hash,
            total_steps: total,
        }),
    ))
}

fn job_status(state: &AppState, id: u64) -> Result<(JobStatus, Arc<AtomicBool>), HttpError> {
    let jobs = state.jobs.lock().unwrap();
    let job = jobs
        .get(&id)
        .ok_or_else(|| ApiError::new(ErrorKind::NotFound, format!("no job {id}")))?;
    let status = job.status.lock().unwrap().clone();
    Ok((status, job.cancel.clone()))
}

async fn get_job(State(state): State<Arc<AppState>>, Path(id): Path<u64>) -> HttpResult<JobStatus> {
    Ok(Json(job_status(&state, id)?.0))
}

async fn cancel_job(State(state): State<Arc<AppState>>, Path(id): Path<u64>) -> HttpResult<JobStatus> {
    let (status, cancel) = job_status(&state, id)?;
    cancel.store(true, Ordering::Relaxed);
    Ok(Json(status))
}

async fn eval(body: Result<Json<EvalRequest>, JsonRejection>) -> HttpResult<EvalResponse> {
    let Json(req) = body?;
    Ok(Json(blocking(move || run_eval(&req)).await?))
}

async fn embed(body: Result<Json<EmbedRequest>, JsonRejection>) -> HttpResult<EmbedResponse> {
    let Json(req) = body?;
    Ok(Json(blocking(move || run_embed(&req)).await?))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/train", post(start_train))
        .route("/v1/jobs/{id}", get(get_job).delete(cancel_job))
        .route("/v1/eval", post(eval))
        .route("/v1/embed", post(embed))
        .with_state(state)
}

/// Serves on `listener` until the future is dropped or the process exits.
pub async fn serve(listener: TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(Arc::new(AppState::default()))).await
}

/// Binds `addr` (port 0 picks a free one) and serves in a background task.
pub async fn spawn(
    addr: SocketAddr,
) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<std::io::Result<()>>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    Ok((local, tokio::spawn(serve(listener))))
}
