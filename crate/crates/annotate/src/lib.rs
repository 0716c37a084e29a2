//! HTTP backend for the labeling app: serves dataset windows for playback
//! and persists labels to the same CSV the training pipeline reads.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/api/info` | dataset descriptor, class names, cursor |
//! | GET | `/api/sequence?stream=&start=&length=` | frames of one window |
//! | POST | `/api/labels` | store `{stream_id, start, length, label}` |
//! | GET | `/api/labels` | every stored record, in insertion order |
//!
//! Anything else is served from the static UI directory when one is configured.

mod store;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use kinevae_core::{ClassNames, DanceStream, LabelRecord};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;
use tower_http::services::ServeDir;

pub use store::{LabelStore, StoreError, Upsert};

pub const DEFAULT_PORT: u16 = 8717;
pub const DEFAULT_LOCK_TIMEOUT: Duration = Duration::from_secs(2);

/// Loaded dataset plus a stream-id lookup.
#[derive(Debug)]
pub struct Dataset {
    streams: Vec<DanceStream>,
    by_id: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(streams: Vec<DanceStream>) -> Self {
        let by_id = streams.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect();
        Self { streams, by_id }
    }

    pub fn streams(&self) -> &[DanceStream] {
        &self.streams
    }

    fn get(&self, id: &str) -> Option<&DanceStream> {
        self.by_id.get(id).map(|&i| &self.streams[i])
    }
}

struct Session {
    store: LabelStore,
    cursor: usize,
}

#[derive(Clone)]
pub struct AppState {
    dataset: Option<Arc<Dataset>>,
    window_length: usize,
    lock_timeout: Duration,
    session: Arc<Mutex<Session>>,
}

impl AppState {
    /// `dataset` is `None` when loading failed; data endpoints then answer 503.
    pub fn new(dataset: Option<Dataset>, store: LabelStore, window_length: usize, start_index: usize) -> Self {
        Self {
            dataset: dataset.map(Arc::new),
            window_length,
            lock_timeout: DEFAULT_LOCK_TIMEOUT,
            session: Arc::new(Mutex::new(Session {
                store,
                cursor: start_index,
            })),
        }
    }

    /// How long a label write waits for the writer lock before answering 409.
    pub fn with_lock_timeout(mut self, timeout: Duration) -> Self {
        self.lock_timeout = timeout;
        self
    }

    /// Hold the writer lock, e.g. while another tool rewrites the label file.
    /// Label posts arriving meanwhile fail with 409 after the lock timeout.
    pub async fn hold_writer_lock(&self) -> impl Drop + '_ {
        self.session.lock().await
    }
}

/// Error responses carry `{"error": message}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(serde_json::json!({ "error": self.message }));
        (self.status, body).into_response()
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        ApiError::new(e.status(), e.body_text())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(e.status(), e.body_text())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        log::error!("{e}");
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

fn dataset(state: &AppState) -> Result<&Dataset, ApiError> {
    state
        .dataset
        .as_deref()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "dataset not loaded"))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct StreamInfo {
    pub id: String,
    pub num_frames: usize,
    pub num_joints: usize,
    pub fps: f64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct InfoResponse {
    pub streams: Vec<StreamInfo>,
    /// Joint count shared by every stream, if they agree.
    pub num_joints: Option<usize>,
    pub class_names: Vec<String>,
    pub window_length: usize,
    pub cursor: usize,
}

async fn get_info(State(state): State<AppState>) -> Result<Json<InfoResponse>, ApiError> {
    let data = dataset(&state)?;
    let streams: Vec<StreamInfo> = data
        .streams
        .iter()
        .map(|s| StreamInfo {
            id: s.id.clone(),
            num_frames: s.len(),
            num_joints: s.num_joints,
            fps: s.frame_rate_hz,
        })
        .collect();
    let num_joints = streams
        .first()
        .map(|s| s.num_joints)
        .filter(|&j| streams.iter().all(|s| s.num_joints == j));
    let session = state.session.lock().await;
    Ok(Json(InfoResponse {
        streams,
        num_joints,
        class_names: session.store.classes().names().to_vec(),
        window_length: state.window_length,
        cursor: session.cursor,
    }))
}

#[derive(Debug, Deserialize)]
struct SequenceQuery {
    stream: String,
    start: usize,
    length: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SequenceResponse {
    pub stream_id: String,
    pub start: usize,
    pub length: usize,
    pub fps: f64,
    pub num_joints: usize,
    pub frame_indices: Vec<usize>,
    /// One row of `3·J` coordinates per frame.
    pub frames: Vec<Vec<f64>>,
}

fn window_of<'d>(data: &'d Dataset, stream: &str, start: usize, length: usize) -> Result<&'d DanceStream, ApiError> {
    let s = data
        .get(stream)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown stream {stream:?}")))?;
    if length == 0 {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "length must be positive"));
    }
    if start.checked_add(length).is_none_or(|end| end > s.len()) {
        return Err(ApiError::new(
            StatusCode::RANGE_NOT_SATISFIABLE,
            format!(
                "window {start}..{} exceeds stream {stream:?} of {} frames",
                start.saturating_add(length),
                s.len()
            ),
        ));
    }
    Ok(s)
}

async fn get_sequence(
    State(state): State<AppState>,
    query: Result<Query<SequenceQuery>, QueryRejection>,
) -> Result<Json<SequenceResponse>, ApiError> {
    let Query(q) = query?;
    let data = dataset(&state)?;
    let length = q.length.unwrap_or(state.window_length);
    let s = window_of(data, &q.stream, q.start, length)?;
    let view = s.window_view(q.start, length).expect("bounds checked");
    Ok(Json(SequenceResponse {
        stream_id: s.id.clone(),
        start: q.start,
        length,
        fps: s.frame_rate_hz,
        num_joints: s.num_joints,
        frame_indices: (q.start..q.start + length).collect(),
        frames: view.rows().into_iter().map(|r| r.to_vec()).collect(),
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LabelRow {
    pub stream_id: String,
    pub start: usize,
    pub length: usize,
    pub label: String,
    pub provenance: String,
}

impl LabelRow {
    fn from_record(r: &LabelRecord, classes: &ClassNames) -> Self {
        Self {
            stream_id: r.stream_id.clone(),
            start: r.start,
            length: r.length,
            label: classes.name(r.label).unwrap_or("?").to_string(),
            provenance: r.provenance.as_str().to_string(),
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct LabelRequest {
    pub stream_id: String,
    pub start: usize,
    pub length: usize,
    pub label: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct LabelResponse {
    pub record: LabelRow,
    /// True when an earlier label on the same window was overwritten.
    pub replaced: bool,
    pub cursor: usize,
}

async fn post_label(
    State(state): State<AppState>,
    body: Result<Json<LabelRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<LabelResponse>), ApiError> {
    let Json(req) = body?;
    let data = dataset(&state)?;
    window_of(data, &req.stream_id, req.start, req.length)?;
    let mut session = tokio::time::timeout(state.lock_timeout, state.session.lock())
        .await
        .map_err(|_| ApiError::new(StatusCode::CONFLICT, "another label write is in progress"))?;
    let classes = session.store.classes().clone();
    let label = classes.index_of(&req.label).map_err(|_| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            format!(
                "invalid label {:?}; valid labels: {}",
                req.label,
                classes.names().join(", ")
            ),
        )
    })?;
    let record = LabelRecord::manual(req.stream_id, req.start, req.length, label);
    let outcome = session.store.upsert(record.clone())?;
    session.cursor = record.start + record.length;
    let replaced = matches!(outcome, Upsert::Replaced { .. });
    let status = if replaced { StatusCode::OK } else { StatusCode::CREATED };
    Ok((
        status,
        Json(LabelResponse {
            record: LabelRow::from_record(&record, &classes),
            replaced,
            cursor: session.cursor,
        }),
    ))
}

async fn get_labels(State(state): State<AppState>) -> Json<Vec<LabelRow>> {
    let session = state.session.lock().await;
    let classes = session.store.classes();
    Json(
        session
            .store
            .records()
            .iter()
            .map(|r| LabelRow::from_record(r, classes))
            .collect(),
    )
}

/// The API routes, plus the static UI bundle at `/` when `static_dir` is set.
pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/info", get(get_info))
        .route("/api/sequence", get(get_sequence))
        .route("/api/labels", get(get_labels).post(post_label))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serve `app` on an already bound listener until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    app: Router,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    log::info!("annotation service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}
