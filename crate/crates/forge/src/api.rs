use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use collage_core::error::Error;
use collage_core::session::{
    ControlAction, EditCommand, EditOutcome, ExportRecord, Session, SessionConfig, SessionHandle, SessionState,
};
use collage_core::transforms::HumanPose;
use serde::{Deserialize, Serialize};

#[derive(Clone, Default)]
pub struct AppState {
    sessions: Arc<Mutex<BTreeMap<String, Arc<SessionHandle>>>>,
    next_id: Arc<AtomicU64>,
    multi_session: bool,
}

impl AppState {
    pub fn new(multi_session: bool) -> Self {
        Self {
            multi_session,
            ..Self::default()
        }
    }

    fn get(&self, id: &str) -> Result<Arc<SessionHandle>, ApiError> {
        self.sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::from(Error::NotFound(format!("session {id}"))))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/session", post(create_session))
        .route("/session/{id}", axum::routing::delete(delete_session))
        .route("/session/{id}/state", get(session_state))
        .route("/session/{id}/control", post(control))
        .route("/session/{id}/edit", post(edit))
        .route("/session/{id}/hit", get(hit))
        .route("/session/{id}/snapshot", get(snapshot))
        .route("/session/{id}/export", post(export))
        .route("/session/{id}/checkpoint", post(checkpoint))
        .with_state(state)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: error.into(),
                message: message.into(),
            },
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        use StatusCode as S;
        let (status, kind) = match &e {
            Error::NotFound(_) => (S::NOT_FOUND, "not_found"),
            Error::NoPatches(_) => (S::BAD_REQUEST, "no_patches"),
            Error::InvalidConfig(_) => (S::BAD_REQUEST, "invalid_config"),
            Error::InvalidLayout(_) => (S::BAD_REQUEST, "invalid_layout"),
            Error::ShapeMismatch { .. } => (S::BAD_REQUEST, "shape_mismatch"),
            Error::OutOfBounds { .. } => (S::BAD_REQUEST, "out_of_bounds"),
            Error::Codec(_) => (S::BAD_REQUEST, "codec"),
            Error::Degenerate(_) => (S::UNPROCESSABLE_ENTITY, "degenerate"),
            Error::AggregationError(_) => (S::UNPROCESSABLE_ENTITY, "aggregation"),
            Error::InvalidPhase(_) => (S::CONFLICT, "invalid_phase"),
            Error::EditWhileRunning => (S::CONFLICT, "edit_while_running"),
            Error::ChecksumError(_) => (S::UNPROCESSABLE_ENTITY, "checksum"),
            Error::LibraryMismatch => (S::UNPROCESSABLE_ENTITY, "library_mismatch"),
            Error::CriticUnavailable(_) => (S::SERVICE_UNAVAILABLE, "critic_unavailable"),
            Error::ProtocolError(_) => (S::BAD_GATEWAY, "critic_protocol"),
            Error::Io(_) => (S::INTERNAL_SERVER_ERROR, "io"),
        };
        Self::new(status, kind, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs a blocking session call off the async executor.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, Error> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
    pub state: SessionState,
}

async fn create_session(State(app): State<AppState>, Json(config): Json<SessionConfig>) -> ApiResult<(StatusCode, Json<Created>)> {
    if !app.multi_session && !app.sessions.lock().unwrap().is_empty() {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "session_exists",
            "a session is already active; delete it or start the server with --multi-session",
        ));
    }
    let handle = blocking(move || Session::new(config).map(SessionHandle::spawn)).await?;
    let handle = Arc::new(handle);
    let state = blocking({
        let h = handle.clone();
        move || h.state()
    })
    .await?;
    let mut sessions = app.sessions.lock().unwrap();
    // Another request may have won the race while the library loaded.
    if !app.multi_session && !sessions.is_empty() {
        return Err(ApiError::new(StatusCode::CONFLICT, "session_exists", "a session is already active"));
    }
    let id = format!("s{}", app.next_id.fetch_add(1, Ordering::Relaxed) + 1);
    sessions.insert(id.clone(), handle);
    tracing::info!(%id, "session created");
    Ok((StatusCode::CREATED, Json(Created { id, state })))
}

async fn delete_session(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    let handle = app
        .sessions
        .lock()
        .unwrap()
        .remove(&id)
        .ok_or_else(|| ApiError::from(Error::NotFound(format!("session {id}"))))?;
    // Dropping the last handle joins the worker thread.
    tokio::task::spawn_blocking(move || drop(handle)).await.ok();
    Ok(StatusCode::NO_CONTENT)
}

async fn session_state(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionState>> {
    let h = app.get(&id)?;
    blocking(move || h.state()).await.map(Json)
}

async fn control(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(action): Json<ControlAction>,
) -> ApiResult<Json<SessionState>> {
    let h = app.get(&id)?;
    blocking(move || h.control(action)).await.map(Json)
}

async fn edit(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(cmd): Json<EditCommand>,
) -> ApiResult<Json<EditOutcome>> {
    let h = app.get(&id)?;
    blocking(move || h.edit(cmd)).await.map(Json)
}

#[derive(Debug, Deserialize)]
pub struct HitQuery {
    pub x: i64,
    pub y: i64,
    pub genome: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HitResponse {
    pub patch: Option<usize>,
}

async fn hit(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<HitQuery>,
) -> ApiResult<Json<HitResponse>> {
    let h = app.get(&id)?;
    blocking(move || h.hit(q.x, q.y, q.genome))
        .await
        .map(|patch| Json(HitResponse { patch }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SnapshotBody {
    pub step: usize,
    pub genome_id: usize,
    pub png_base64: String,
    pub poses: Vec<HumanPose>,
}

async fn snapshot(State(app): State<AppState>, Path(id): Path<String>, headers: HeaderMap) -> ApiResult<Response> {
    let h = app.get(&id)?;
    let snap = blocking(move || h.snapshot()).await?;
    let wants_png = headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains("image/png"));
    if wants_png {
        return Ok(([(header::CONTENT_TYPE, "image/png")], snap.png).into_response());
    }
    Ok(Json(SnapshotBody {
        step: snap.step,
        genome_id: snap.genome_id,
        png_base64: BASE64.encode(&snap.png),
        poses: snap.poses,
    })
    .into_response())
}

#[derive(Debug, Deserialize)]
pub struct ExportRequest {
    pub width: usize,
    pub height: usize,
}

async fn export(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<ExportRequest>,
) -> ApiResult<Json<ExportRecord>> {
    let h = app.get(&id)?;
    blocking(move || h.export_hires(req.width, req.height)).await.map(Json)
}

#[derive(Clone, Copy, Debug, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointAction {
    #[default]
    Save,
    Load,
}

#[derive(Debug, Deserialize)]
pub struct CheckpointRequest {
    pub path: PathBuf,
    #[serde(default)]
    pub action: CheckpointAction,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointResponse {
    pub path: PathBuf,
    pub state: SessionState,
}

async fn checkpoint(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<CheckpointRequest>,
) -> ApiResult<Json<CheckpointResponse>> {
    let h = app.get(&id)?;
    blocking(move || {
        let path = match req.action {
            CheckpointAction::Save => h.save_checkpoint(req.path)?,
            CheckpointAction::Load => {
                h.load_checkpoint(req.path.clone())?;
                req.path
            }
        };
        Ok(CheckpointResponse { path, state: h.state()? })
    })
    .await
    .map(Json)
}
