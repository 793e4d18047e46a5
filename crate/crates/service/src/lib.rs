//! HTTP/JSON front of the human-oracle queue.
//!
//! The service keeps no state of its own beyond a writer lock: every
//! request reads `state.json` and `queue.jsonl` from the run directory,
//! and mutations are written back by atomic rename before the lock is
//! released. A crashed service therefore resumes from disk, and the
//! orchestrator can resolve tickets between requests.

use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::Mutex;
use tower_http::cors::{AllowOrigin, CorsLayer};

use segxal_core::geometry::Edit;
use segxal_core::io::read_label_png;
use segxal_core::oracle::AnnotationRecord;
use segxal_core::orchestrator::{read_state, ALState, OracleMode, StopReason, Strategy};
use segxal_core::queue::{now_ms, Queue, Ticket, TicketStatus, TicketSummary, DEFAULT_LEASE_MS};
use segxal_core::types::LabelMask;
use segxal_core::Error;

pub const QUEUE_FILE: &str = "queue.jsonl";

/// Milliseconds since the epoch; replaceable so tests can drive leases.
pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// `None` serves 503 on every run-scoped endpoint.
    pub run_dir: Option<PathBuf>,
    /// Allowed browser origin; any origin when `None`.
    pub cors_origin: Option<String>,
    pub lease_ms: u64,
}

impl ServiceConfig {
    pub fn new(run_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            run_dir: Some(run_dir.into()),
            cors_origin: None,
            lease_ms: DEFAULT_LEASE_MS,
        }
    }
}

struct AppState {
    config: ServiceConfig,
    clock: Clock,
    writer: Mutex<()>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnknownTicket(_) => StatusCode::NOT_FOUND,
            Error::TicketConflict { .. } | Error::DuplicateTicket(_) => StatusCode::CONFLICT,
            Error::LeaseExpired(_) => StatusCode::GONE,
            Error::Geometry(_) | Error::Precondition(_) | Error::ShapeMismatch { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClaimRequest {
    pub annotator_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationRequest {
    pub annotator_id: String,
    pub edits: Vec<Edit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationResponse {
    pub ticket_id: String,
    pub status: TicketStatus,
    /// [`mask_checksum`] of `record.corrected`.
    pub checksum: String,
    pub record: AnnotationRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSizes {
    pub labeled: usize,
    pub unlabeled: usize,
    pub candidate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendPoint {
    pub cycle: usize,
    pub miou: f64,
    pub samples_labeled: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueueCounts {
    pub pending: usize,
    pub claimed: usize,
    pub submitted: usize,
    pub resolved: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusResponse {
    pub cycle: usize,
    pub num_cycles: usize,
    pub strategy: Strategy,
    pub oracle: OracleMode,
    pub stopped: Option<StopReason>,
    /// Cycle waiting on human annotations, if any.
    pub pending_cycle: Option<usize>,
    pub pool: PoolSizes,
    pub queried_total: usize,
    pub num_classes: usize,
    /// Cycle 0 is the model trained on the initial labeled pool.
    pub trend: Vec<TrendPoint>,
    pub queue: QueueCounts,
}

/// SHA-256 over the row-major label bytes, lowercase hex.
pub fn mask_checksum(mask: &LabelMask) -> String {
    let mut h = Sha256::new();
    for &v in mask.labels.iter() {
        h.update([v]);
    }
    hex::encode(h.finalize())
}

pub fn router(config: ServiceConfig) -> Router {
    router_with_clock(config, Arc::new(now_ms))
}

pub fn router_with_clock(config: ServiceConfig, clock: Clock) -> Router {
    let origin = match &config.cors_origin {
        Some(o) => AllowOrigin::exact(HeaderValue::from_str(o).unwrap_or(HeaderValue::from_static("null"))),
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    let state = Arc::new(AppState {
        config,
        clock,
        writer: Mutex::new(()),
    });
    Router::new()
        .route("/api/queue", get(list_queue))
        .route("/api/tickets/{id}", get(get_ticket))
        .route("/api/tickets/{id}/claim", post(claim))
        .route("/api/tickets/{id}/annotation", post(annotate))
        .route("/api/assets/{*path}", get(asset))
        .route("/api/status", get(status))
        .layer(cors)
        .with_state(state)
}

/// Serves `app` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    app: Router,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}

impl AppState {
    fn run(&self) -> ApiResult<(&Path, ALState)> {
        let dir = self
            .config
            .run_dir
            .as_deref()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no active run"))?;
        let state = read_state(dir).map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, format!("no active run: {e}")))?;
        Ok((dir, state))
    }

    fn queue(&self, dir: &Path) -> ApiResult<Queue> {
        let mut q = Queue::open(dir.join(QUEUE_FILE))?;
        q.lease_ms = self.config.lease_ms;
        Ok(q)
    }
}

async fn list_queue(State(app): State<Arc<AppState>>) -> ApiResult<Json<Vec<TicketSummary>>> {
    let _w = app.writer.lock().await;
    let (dir, state) = app.run()?;
    let mut q = app.queue(dir)?;
    let cycle = state.pending.as_ref().map(|p| p.cycle).unwrap_or(state.cycle + 1);
    Ok(Json(q.active(Some(cycle), (app.clock)())))
}

async fn get_ticket(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Ticket>> {
    let _w = app.writer.lock().await;
    let (dir, _) = app.run()?;
    let mut q = app.queue(dir)?;
    q.expire((app.clock)());
    q.get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| Error::UnknownTicket(id).into())
}

async fn claim(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<ClaimRequest>, JsonRejection>,
) -> ApiResult<Json<Ticket>> {
    let Json(req) = body?;
    if req.annotator_id.is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "annotator_id is empty"));
    }
    let _w = app.writer.lock().await;
    let (dir, _) = app.run()?;
    let mut q = app.queue(dir)?;
    let t = q.claim(&id, &req.annotator_id, (app.clock)())?;
    q.save()?;
    log::info!("ticket {id} claimed by {}", req.annotator_id);
    Ok(Json(t))
}

async fn annotate(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<AnnotationRequest>, JsonRejection>,
) -> ApiResult<Json<AnnotationResponse>> {
    let Json(req) = body?;
    let _w = app.writer.lock().await;
    let (dir, state) = app.run()?;
    let mut q = app.queue(dir)?;
    let ticket = q.get(&id).cloned().ok_or_else(|| Error::UnknownTicket(id.clone()))?;

    // A retried submission of the same edits returns the stored record.
    if let Some(sub) = &ticket.submission {
        if sub.annotator_id == req.annotator_id && sub.edits == req.edits {
            return Ok(Json(AnnotationResponse {
                ticket_id: id,
                status: ticket.status,
                checksum: mask_checksum(&sub.record.corrected),
                record: sub.record.clone(),
            }));
        }
    }

    let initial = read_label_png(&dir.join(&ticket.initial_mask), state.config.model.num_classes as u8)?;
    let record = q.submit(&id, &req.annotator_id, req.edits, &initial, (app.clock)())?;
    q.save()?;
    log::info!("ticket {id} submitted by {}", req.annotator_id);
    Ok(Json(AnnotationResponse {
        ticket_id: id,
        status: TicketStatus::Submitted,
        checksum: mask_checksum(&record.corrected),
        record,
    }))
}

/// Rejects anything but a plain relative path below the run directory.
fn safe_relative(path: &str) -> Option<PathBuf> {
    let p = Path::new(path);
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::Normal(s) => out.push(s),
            _ => return None,
        }
    }
    (!out.as_os_str().is_empty()).then_some(out)
}

async fn asset(State(app): State<Arc<AppState>>, UrlPath(path): UrlPath<String>) -> ApiResult<Response> {
    let (dir, _) = app.run()?;
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, format!("no asset `{path}`"));
    let rel = safe_relative(&path).ok_or_else(not_found)?;
    let content_type = match rel.extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        Some("json") => "application/json",
        _ => return Err(not_found()),
    };
    let bytes = tokio::fs::read(dir.join(&rel)).await.map_err(|_| not_found())?;
    Ok(([(header::CONTENT_TYPE, content_type)], bytes).into_response())
}

async fn status(State(app): State<Arc<AppState>>) -> ApiResult<Json<StatusResponse>> {
    let _w = app.writer.lock().await;
    let (dir, state) = app.run()?;
    let mut q = app.queue(dir)?;
    q.expire((app.clock)());
    let mut counts = QueueCounts::default();
    for t in q.tickets() {
        match t.status {
            TicketStatus::Pending => counts.pending += 1,
            TicketStatus::Claimed => counts.claimed += 1,
            TicketStatus::Submitted => counts.submitted += 1,
            TicketStatus::Resolved => counts.resolved += 1,
        }
    }
    let trend = state
        .initial_metrics
        .iter()
        .chain(&state.per_cycle_metrics)
        .map(|m| TrendPoint {
            cycle: m.cycle,
            miou: m.miou,
            samples_labeled: m.samples_labeled,
        })
        .collect();
    Ok(Json(StatusResponse {
        cycle: state.cycle,
        num_cycles: state.config.al.num_cycles,
        strategy: state.strategy(),
        oracle: state.oracle_mode(),
        stopped: state.stopped,
        pending_cycle: state.pending.as_ref().map(|p| p.cycle),
        pool: PoolSizes {
            labeled: state.pool.labeled.len(),
            unlabeled: state.pool.unlabeled.len(),
            candidate: state.pool.candidate.len(),
        },
        queried_total: state.queried_total,
        num_classes: state.config.model.num_classes,
        trend,
        queue: counts,
    }))
}
