use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Redirect, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tokio::sync::{mpsc, oneshot};
use tower::ServiceExt;
use tower_http::services::ServeFile;

use crate::error::ServiceError;
use crate::store::{Ack, Payload, Store, Submission, Task, TaskKind};

pub trait Clock: Send + Sync {
    /// Unix seconds.
    fn now(&self) -> f64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> f64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
    }
}

/// Clock that only moves when told to.
#[derive(Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start: f64) -> Self {
        Self(AtomicU64::new(start.to_bits()))
    }

    pub fn advance(&self, secs: f64) {
        let now = self.now();
        self.0.store((now + secs).to_bits(), Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> f64 {
        f64::from_bits(self.0.load(Ordering::SeqCst))
    }
}

enum Command {
    Next {
        rater: String,
        kind: TaskKind,
        reply: oneshot::Sender<Option<Task>>,
    },
    Submit {
        submission: Submission,
        reply: oneshot::Sender<Result<Ack, ServiceError>>,
    },
}

/// Every lease and submission goes through one thread, in arrival order.
fn spawn_writer(store: Arc<RwLock<Store>>, clock: Arc<dyn Clock>) -> mpsc::Sender<Command> {
    let (tx, mut rx) = mpsc::channel::<Command>(256);
    std::thread::Builder::new()
        .name("store-writer".into())
        .spawn(move || {
            while let Some(cmd) = rx.blocking_recv() {
                let now = clock.now();
                let mut store = store.write().unwrap_or_else(|e| e.into_inner());
                match cmd {
                    Command::Next { rater, kind, reply } => {
                        let _ = reply.send(store.next_task(&rater, kind, now));
                    }
                    Command::Submit { submission, reply } => {
                        let _ = reply.send(store.submit(submission, now));
                    }
                }
            }
        })
        .expect("spawn store writer");
    tx
}

#[derive(Clone)]
pub struct AppState {
    writer: mpsc::Sender<Command>,
    store: Arc<RwLock<Store>>,
    tokens: Arc<HashMap<String, String>>,
    media_root: Option<PathBuf>,
}

impl AppState {
    pub fn new(
        store: Store,
        tokens: HashMap<String, String>,
        media_root: Option<PathBuf>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        let store = Arc::new(RwLock::new(store));
        Self {
            writer: spawn_writer(store.clone(), clock),
            store,
            tokens: Arc::new(tokens),
            media_root,
        }
    }

    /// Read access to the store, e.g. for inspection in tests.
    pub fn with_store<R>(&self, f: impl FnOnce(&Store) -> R) -> R {
        f(&self.store.read().unwrap_or_else(|e| e.into_inner()))
    }

    fn rater(&self, headers: &HeaderMap, query_token: Option<&str>) -> Result<String, ServiceError> {
        let bearer = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        bearer
            .or(query_token)
            .and_then(|t| self.tokens.get(t.trim()))
            .cloned()
            .ok_or(ServiceError::Unauthorized)
    }

    async fn call<T>(&self, cmd: Command, rx: oneshot::Receiver<T>) -> Result<T, ServiceError> {
        self.writer.send(cmd).await.map_err(|_| ServiceError::Unavailable)?;
        rx.await.map_err(|_| ServiceError::Unavailable)
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/tasks/next", get(next_task))
        .route("/submissions", post(submit))
        .route("/clips/{id}/media", get(media))
        .route("/export", get(export))
        .with_state(state)
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    let (clips, pending) = state.with_store(|s| (s.len(), s.pending()));
    Json(serde_json::json!({ "status": "ok", "clips": clips, "pending": pending }))
}

#[derive(Deserialize)]
struct NextQuery {
    kind: String,
}

async fn next_task(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<NextQuery>,
) -> Result<Json<serde_json::Value>, ServiceError> {
    let rater = state.rater(&headers, None)?;
    let kind: TaskKind = q.kind.parse().map_err(ServiceError::BadRequest)?;
    let (reply, rx) = oneshot::channel();
    let task = state.call(Command::Next { rater, kind, reply }, rx).await?;
    Ok(Json(serde_json::json!({ "task": task })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SubmissionBody {
    task_id: String,
    #[serde(default)]
    rater_id: Option<String>,
    payload: Payload,
    #[serde(default)]
    submitted_at: Option<f64>,
}

async fn submit(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Json<Ack>, ServiceError> {
    let rater = state.rater(&headers, None)?;
    let body: SubmissionBody =
        serde_json::from_slice(&body).map_err(|e| ServiceError::BadRequest(format!("submission body: {e}")))?;
    if body.rater_id.as_ref().is_some_and(|r| *r != rater) {
        return Err(ServiceError::BadRequest("rater_id does not match the bearer token".into()));
    }
    let submission = Submission {
        task_id: body.task_id,
        rater_id: rater,
        payload: body.payload,
        submitted_at: body.submitted_at,
    };
    let (reply, rx) = oneshot::channel();
    let ack = state.call(Command::Submit { submission, reply }, rx).await??;
    Ok(Json(ack))
}

#[derive(Deserialize)]
struct MediaQuery {
    access_token: Option<String>,
}

/// Serves a local clip file (with byte ranges) or redirects to its URL.
async fn media(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<MediaQuery>,
    req: Request,
) -> Result<Response, ServiceError> {
    state.rater(req.headers(), q.access_token.as_deref())?;
    let media = state
        .with_store(|s| s.clip_media(&id).map(|m| m.map(str::to_string)))?
        .ok_or_else(|| ServiceError::MediaUnavailable(id.clone()))?;
    if media.starts_with("http://") || media.starts_with("https://") {
        return Ok(Redirect::temporary(&media).into_response());
    }
    let mut path = PathBuf::from(&media);
    if let (true, Some(root)) = (path.is_relative(), &state.media_root) {
        path = root.join(path);
    }
    if !path.is_file() {
        return Err(ServiceError::MediaUnavailable(id));
    }
    let res = ServeFile::new(path)
        .oneshot(req)
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?;
    Ok(res.map(Body::new))
}

#[derive(Deserialize)]
struct ExportQuery {
    #[serde(default)]
    format: Option<String>,
}

async fn export(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<ExportQuery>,
) -> Result<Response, ServiceError> {
    state.rater(&headers, None)?;
    match q.format.as_deref().unwrap_or("release") {
        "release" => {}
        other => return Err(ServiceError::UnsupportedFormat(other.to_string())),
    }
    let bytes = state.with_store(|s| s.export_release())?;
    Ok((StatusCode::OK, [(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}
