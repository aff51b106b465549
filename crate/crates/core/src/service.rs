//! HTTP annotation service.
//!
//! All model work (encoding, decoding, detection) and every session access
//! runs through one FIFO queue with a bounded number of waiting requests and
//! a per-request timeout. At most `max_sessions` sessions stay in memory; the
//! least recently used ones are spilled to disk as annotation exports and
//! re-embedded on the next access.

use std::collections::{HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use uuid::Uuid;

use crate::dataio::{export_session, import_session, AnnotationFile};
use crate::maskcore::rle::{self, Rle};
use crate::maskcore::Prompt;
use crate::model::{load_checkpoint, ModelConfig, PromptableModel, ToyBackbone};
use crate::pipeline::{BlobDetector, CellDetector, ExternalDetector, MaskRecord, MaskSource, Session};
use crate::raster::RgbImage;
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub port: u16,
    pub queue_depth: usize,
    pub timeout: Duration,
    pub max_sessions: usize,
    pub max_upload_bytes: usize,
    pub max_image_side: usize,
    /// Spilled and persisted sessions live here; `None` uses a temporary
    /// directory that is not reloaded after a restart.
    pub persist_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            port: 8080,
            queue_depth: 16,
            timeout: Duration::from_secs(30),
            max_sessions: 16,
            max_upload_bytes: 64 << 20,
            max_image_side: 8192,
            persist_dir: None,
        }
    }
}

/// Which detector the service uses for automatic segmentation.
#[derive(Debug, Clone, PartialEq)]
pub enum DetectorMode {
    None,
    Blob,
    /// Program and arguments of an external detector.
    External(Vec<String>),
}

impl std::str::FromStr for DetectorMode {
    type Err = Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "" | "blob" => Ok(Self::Blob),
            "none" => Ok(Self::None),
            _ => match s.strip_prefix("external:") {
                Some(cmd) if !cmd.trim().is_empty() => {
                    Ok(Self::External(cmd.split_whitespace().map(String::from).collect()))
                }
                _ => Err(Error::Config(format!("unknown detector mode {s:?}"))),
            },
        }
    }
}

impl DetectorMode {
    pub fn build(&self, timeout: Duration) -> Option<Arc<dyn CellDetector>> {
        match self {
            DetectorMode::None => None,
            DetectorMode::Blob => Some(Arc::new(BlobDetector::default())),
            DetectorMode::External(cmd) => {
                let mut d = ExternalDetector::new(&cmd[0]);
                d.args = cmd[1..].to_vec();
                d.timeout = timeout;
                Some(Arc::new(d))
            }
        }
    }
}

/// Settings read from `CELLPILOT_*` environment variables.
#[derive(Debug, Clone)]
pub struct EnvSettings {
    pub checkpoint: Option<PathBuf>,
    pub detector: DetectorMode,
    pub service: ServiceConfig,
}

impl EnvSettings {
    pub fn from_env() -> crate::Result<Self> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> crate::Result<Self> {
        fn parse<T: std::str::FromStr>(key: &str, v: Option<String>) -> crate::Result<Option<T>> {
            v.map(|s| {
                s.trim()
                    .parse::<T>()
                    .map_err(|_| Error::Config(format!("{key}: cannot parse {s:?}")))
            })
            .transpose()
        }
        let mut service = ServiceConfig::default();
        if let Some(p) = parse("CELLPILOT_PORT", get("CELLPILOT_PORT"))? {
            service.port = p;
        }
        if let Some(q) = parse::<usize>("CELLPILOT_QUEUE_DEPTH", get("CELLPILOT_QUEUE_DEPTH"))? {
            if q == 0 {
                return Err(Error::Config("CELLPILOT_QUEUE_DEPTH must be positive".into()));
            }
            service.queue_depth = q;
        }
        if let Some(t) = parse::<u64>("CELLPILOT_TIMEOUT_SECS", get("CELLPILOT_TIMEOUT_SECS"))? {
            service.timeout = Duration::from_secs(t);
        }
        if let Some(n) = parse::<usize>("CELLPILOT_MAX_SESSIONS", get("CELLPILOT_MAX_SESSIONS"))? {
            service.max_sessions = n.max(1);
        }
        service.persist_dir = get("CELLPILOT_PERSIST_DIR").map(PathBuf::from);
        Ok(Self {
            checkpoint: get("CELLPILOT_CHECKPOINT").map(PathBuf::from),
            detector: get("CELLPILOT_DETECTOR").unwrap_or_default().parse()?,
            service,
        })
    }

    /// Loads the configured checkpoint, or a freshly initialised toy model.
    pub fn load_model(&self) -> crate::Result<Arc<dyn PromptableModel>> {
        match &self.checkpoint {
            Some(path) => Ok(Arc::new(load_checkpoint(path, None)?)),
            None => {
                log::warn!("CELLPILOT_CHECKPOINT not set; using an untrained toy model");
                Ok(Arc::new(ToyBackbone::new(ModelConfig::default(), 0)?))
            }
        }
    }
}

/// Error body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    #[serde(skip)]
    pub status: u16,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            message: message.into(),
            status: status.as_u16(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn busy(message: impl Into<String>) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "model_error", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::NotFound(_) => Self::not_found(msg),
            Error::Shape { .. }
            | Error::EmptyMask
            | Error::OutOfRange(_)
            | Error::Config(_)
            | Error::InvalidState(_)
            | Error::Format { .. }
            | Error::Image(_)
            | Error::Json(_) => Self::bad_request(msg),
            Error::Detector(_) => {
                let msg = if msg.contains("retry") {
                    msg
                } else {
                    format!("{msg}; retry the request")
                };
                Self::new(StatusCode::SERVICE_UNAVAILABLE, "model_error", msg)
            }
            Error::Io(_) | Error::Checksum(_) => {
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "io_error", msg)
            }
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "model_error", msg),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let mut resp = (status, Json(&self)).into_response();
        if status == StatusCode::SERVICE_UNAVAILABLE {
            resp.headers_mut()
                .insert(header::RETRY_AFTER, header::HeaderValue::from_static("1"));
        }
        resp
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub name: String,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionHandle {
    pub id: Uuid,
    pub created_at: DateTime<Utc>,
    pub image: ImageMeta,
}

/// A mask as sent over the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskView {
    pub id: u64,
    pub source: MaskSource,
    pub score: Option<f64>,
    pub rle: Rle,
    pub history_length: usize,
    pub prompts: Vec<Prompt>,
}

impl From<&MaskRecord> for MaskView {
    fn from(m: &MaskRecord) -> Self {
        Self {
            id: m.id,
            source: m.source,
            score: m.score,
            rle: rle::encode(&m.mask),
            history_length: m.history.len(),
            prompts: m.history.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskList {
    pub masks: Vec<MaskView>,
}

enum Slot {
    Resident(Arc<Mutex<Session>>),
    Spilled,
}

struct Entry {
    handle: SessionHandle,
    slot: Slot,
}

struct Store {
    entries: HashMap<Uuid, Entry>,
    /// Resident ids, least recently used first.
    lru: VecDeque<Uuid>,
    dir: PathBuf,
    persistent: bool,
    _temp: Option<tempfile::TempDir>,
}

fn spill_paths(dir: &Path, id: Uuid) -> (PathBuf, PathBuf) {
    (dir.join(format!("{id}.json")), dir.join(format!("{id}.png")))
}

impl Store {
    fn open(persist: Option<&Path>) -> crate::Result<Self> {
        let (dir, temp) = match persist {
            Some(d) => (d.to_path_buf(), None),
            None => {
                let d = tempfile::Builder::new().prefix("cellpilot-spill-").tempdir()?;
                (d.path().to_path_buf(), Some(d))
            }
        };
        std::fs::create_dir_all(&dir)?;
        let mut store = Store {
            entries: HashMap::new(),
            lru: VecDeque::new(),
            dir,
            persistent: persist.is_some(),
            _temp: temp,
        };
        if store.persistent {
            store.scan()?;
        }
        Ok(store)
    }

    /// Registers previously persisted sessions as spilled.
    fn scan(&mut self) -> crate::Result<()> {
        for entry in std::fs::read_dir(&self.dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let Some(id) = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| Uuid::parse_str(s).ok())
            else {
                continue;
            };
            if !spill_paths(&self.dir, id).1.is_file() {
                continue;
            }
            match AnnotationFile::read(&path) {
                Ok(file) => {
                    let handle = SessionHandle {
                        id,
                        created_at: file.created_at,
                        image: ImageMeta {
                            name: file.image.path.clone(),
                            height: file.image.height,
                            width: file.image.width,
                        },
                    };
                    self.entries.insert(
                        id,
                        Entry {
                            handle,
                            slot: Slot::Spilled,
                        },
                    );
                }
                Err(e) => log::warn!("ignoring persisted session {}: {e}", path.display()),
            }
        }
        Ok(())
    }

    fn touch(&mut self, id: Uuid) {
        self.lru.retain(|x| *x != id);
        self.lru.push_back(id);
    }

    fn write(&self, id: Uuid, session: &Session) -> crate::Result<()> {
        let (json, png) = spill_paths(&self.dir, id);
        if !png.is_file() {
            session.image().save_png(&png)?;
        }
        export_session(session).write(&json)
    }

    fn evict(&mut self, max: usize, keep: Uuid) -> crate::Result<()> {
        while self.lru.len() > max {
            let Some(pos) = self.lru.iter().position(|x| *x != keep) else {
                break;
            };
            let victim = self.lru.remove(pos).expect("index in range");
            if let Some(entry) = self.entries.get_mut(&victim) {
                if let Slot::Resident(s) = &entry.slot {
                    let session = s.lock().expect("session lock poisoned");
                    let (json, png) = spill_paths(&self.dir, victim);
                    if !png.is_file() {
                        session.image().save_png(&png)?;
                    }
                    export_session(&session).write(&json)?;
                }
                entry.slot = Slot::Spilled;
                log::debug!("spilled session {victim}");
            }
        }
        Ok(())
    }
}

pub struct AppState {
    model: Arc<dyn PromptableModel>,
    detector: Option<Arc<dyn CellDetector>>,
    config: ServiceConfig,
    store: Mutex<Store>,
    waiting: Semaphore,
    worker: Semaphore,
}

impl AppState {
    pub fn new(
        model: Arc<dyn PromptableModel>,
        detector: Option<Arc<dyn CellDetector>>,
        config: ServiceConfig,
    ) -> crate::Result<Arc<Self>> {
        let store = Store::open(config.persist_dir.as_deref())?;
        Ok(Arc::new(Self {
            model,
            detector,
            waiting: Semaphore::new(config.queue_depth),
            worker: Semaphore::new(1),
            config,
            store: Mutex::new(store),
        }))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    /// Number of sessions currently held in memory.
    pub fn resident_sessions(&self) -> usize {
        self.store.lock().expect("store lock poisoned").lru.len()
    }

    /// Runs `job` on the blocking pool once it reaches the head of the queue.
    async fn run<T, F>(self: &Arc<Self>, job: F) -> ApiResult<T>
    where
        T: Send + 'static,
        F: FnOnce(&AppState) -> ApiResult<T> + Send + 'static,
    {
        let _slot = self
            .waiting
            .try_acquire()
            .map_err(|_| ApiError::busy("inference queue is full; retry later"))?;
        let timeout = self.config.timeout;
        let work = async {
            let _permit = self.worker.acquire().await.expect("worker semaphore closed");
            let state = Arc::clone(self);
            tokio::task::spawn_blocking(move || job(&state))
                .await
                .map_err(|e| ApiError::from(Error::Model(format!("inference task failed: {e}"))))?
        };
        match tokio::time::timeout(timeout, work).await {
            Ok(r) => r,
            Err(_) => Err(ApiError::busy(format!(
                "request timed out after {}s in the inference queue; retry later",
                timeout.as_secs()
            ))),
        }
    }

    fn session(&self, id: Uuid) -> ApiResult<Arc<Mutex<Session>>> {
        let mut store = self.store.lock().expect("store lock poisoned");
        let entry = store
            .entries
            .get(&id)
            .ok_or_else(|| ApiError::not_found(format!("session {id}")))?;
        let session = match &entry.slot {
            Slot::Resident(s) => Arc::clone(s),
            Slot::Spilled => {
                let (json, png) = spill_paths(&store.dir, id);
                let file = AnnotationFile::read(&json)?;
                let image = RgbImage::open(&png)?;
                let s = Arc::new(Mutex::new(import_session(self.model.as_ref(), image, &file)?));
                store.entries.get_mut(&id).expect("checked above").slot = Slot::Resident(Arc::clone(&s));
                s
            }
        };
        store.touch(id);
        store.evict(self.config.max_sessions, id)?;
        Ok(session)
    }

    fn persist(&self, id: Uuid, session: &Session) -> ApiResult<()> {
        let store = self.store.lock().expect("store lock poisoned");
        if store.persistent {
            store.write(id, session)?;
        }
        Ok(())
    }

    fn create(&self, image: RgbImage, name: String) -> ApiResult<SessionHandle> {
        let session = Session::new(self.model.as_ref(), image, name.clone())?;
        let (height, width) = session.image().dims();
        let handle = SessionHandle {
            id: Uuid::new_v4(),
            created_at: session.created_at,
            image: ImageMeta { name, height, width },
        };
        let mut store = self.store.lock().expect("store lock poisoned");
        if store.persistent {
            store.write(handle.id, &session)?;
        }
        store.entries.insert(
            handle.id,
            Entry {
                handle: handle.clone(),
                slot: Slot::Resident(Arc::new(Mutex::new(session))),
            },
        );
        store.touch(handle.id);
        store.evict(self.config.max_sessions, handle.id)?;
        Ok(handle)
    }

    fn handle(&self, id: Uuid) -> ApiResult<SessionHandle> {
        let store = self.store.lock().expect("store lock poisoned");
        store
            .entries
            .get(&id)
            .map(|e| e.handle.clone())
            .ok_or_else(|| ApiError::not_found(format!("session {id}")))
    }
}

fn parse_id(raw: &str) -> ApiResult<Uuid> {
    Uuid::parse_str(raw).map_err(|_| ApiError::not_found(format!("session {raw}")))
}

fn parse_mask_id(raw: &str) -> ApiResult<u64> {
    raw.parse()
        .map_err(|_| ApiError::not_found(format!("mask {raw}")))
}

fn parse_prompt(body: &[u8]) -> ApiResult<Prompt> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid prompt: {e}")))
}

async fn read_body(body: Body, limit: usize) -> ApiResult<axum::body::Bytes> {
    to_bytes(body, limit)
        .await
        .map_err(|e| ApiError::bad_request(format!("cannot read request body (limit {limit} bytes): {e}")))
}

#[derive(Debug, Deserialize)]
struct CreateQuery {
    name: Option<String>,
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Query(q): Query<CreateQuery>,
    body: Body,
) -> ApiResult<impl IntoResponse> {
    let bytes = read_body(body, state.config.max_upload_bytes).await?;
    if bytes.is_empty() {
        return Err(ApiError::bad_request("empty image upload"));
    }
    let image =
        RgbImage::decode(&bytes).map_err(|e| ApiError::bad_request(format!("undecodable image: {e}")))?;
    let max = state.config.max_image_side;
    if image.height() > max || image.width() > max {
        return Err(ApiError::bad_request(format!(
            "image {}x{} exceeds the {max} px limit",
            image.height(),
            image.width()
        )));
    }
    let name = q.name.unwrap_or_default();
    let handle = state.run(move |s| s.create(image, name)).await?;
    Ok((StatusCode::CREATED, Json(handle)))
}

async fn get_session(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<SessionHandle>> {
    Ok(Json(state.handle(parse_id(&id)?)?))
}

async fn auto_segment(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<MaskList>> {
    let id = parse_id(&id)?;
    let detector = state
        .detector
        .clone()
        .ok_or_else(|| ApiError::busy("no detector configured"))?;
    let list = state
        .run(move |s| {
            let session = s.session(id)?;
            let mut session = session.lock().expect("session lock poisoned");
            let ids = session.auto_segment(s.model.as_ref(), detector.as_ref())?;
            s.persist(id, &session)?;
            let masks = ids
                .iter()
                .map(|m| session.mask(*m).map(MaskView::from))
                .collect::<crate::Result<Vec<_>>>()?;
            Ok(MaskList { masks })
        })
        .await?;
    Ok(Json(list))
}

async fn list_masks(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<MaskList>> {
    let id = parse_id(&id)?;
    let list = state
        .run(move |s| {
            let session = s.session(id)?;
            let session = session.lock().expect("session lock poisoned");
            Ok(MaskList {
                masks: session.masks().iter().map(MaskView::from).collect(),
            })
        })
        .await?;
    Ok(Json(list))
}

async fn add_mask(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Body,
) -> ApiResult<impl IntoResponse> {
    let id = parse_id(&id)?;
    let prompt = parse_prompt(&read_body(body, 1 << 16).await?)?;
    let view = state
        .run(move |s| {
            let session = s.session(id)?;
            let mut session = session.lock().expect("session lock poisoned");
            let mid = session.add_mask(s.model.as_ref(), prompt)?;
            s.persist(id, &session)?;
            Ok(MaskView::from(session.mask(mid)?))
        })
        .await?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn get_mask(
    State(state): State<Arc<AppState>>,
    UrlPath((id, mid)): UrlPath<(String, String)>,
) -> ApiResult<Json<MaskView>> {
    let id = parse_id(&id)?;
    let mid = parse_mask_id(&mid)?;
    let view = state
        .run(move |s| {
            let session = s.session(id)?;
            let session = session.lock().expect("session lock poisoned");
            Ok(MaskView::from(session.mask(mid)?))
        })
        .await?;
    Ok(Json(view))
}

async fn refine_mask(
    State(state): State<Arc<AppState>>,
    UrlPath((id, mid)): UrlPath<(String, String)>,
    body: Body,
) -> ApiResult<Json<MaskView>> {
    let id = parse_id(&id)?;
    let mid = parse_mask_id(&mid)?;
    let prompt = parse_prompt(&read_body(body, 1 << 16).await?)?;
    let view = state
        .run(move |s| {
            let session = s.session(id)?;
            let mut session = session.lock().expect("session lock poisoned");
            let view = MaskView::from(session.refine_mask(s.model.as_ref(), mid, prompt)?);
            s.persist(id, &session)?;
            Ok(view)
        })
        .await?;
    Ok(Json(view))
}

async fn remove_mask(
    State(state): State<Arc<AppState>>,
    UrlPath((id, mid)): UrlPath<(String, String)>,
) -> ApiResult<StatusCode> {
    let id = parse_id(&id)?;
    let mid = parse_mask_id(&mid)?;
    state
        .run(move |s| {
            let session = s.session(id)?;
            let mut session = session.lock().expect("session lock poisoned");
            session.remove_mask(mid)?;
            s.persist(id, &session)
        })
        .await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn undo_prompt(
    State(state): State<Arc<AppState>>,
    UrlPath((id, mid)): UrlPath<(String, String)>,
) -> ApiResult<Json<MaskView>> {
    let id = parse_id(&id)?;
    let mid = parse_mask_id(&mid)?;
    let view = state
        .run(move |s| {
            let session = s.session(id)?;
            let mut session = session.lock().expect("session lock poisoned");
            let view = MaskView::from(session.undo(s.model.as_ref(), mid)?);
            s.persist(id, &session)?;
            Ok(view)
        })
        .await?;
    Ok(Json(view))
}

async fn export(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<AnnotationFile>> {
    let id = parse_id(&id)?;
    let file = state
        .run(move |s| {
            let session = s.session(id)?;
            let session = session.lock().expect("session lock poisoned");
            Ok(export_session(&session))
        })
        .await?;
    Ok(Json(file))
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn no_route() -> ApiError {
    ApiError::not_found("no such endpoint")
}

async fn bad_method() -> ApiError {
    ApiError::new(
        StatusCode::METHOD_NOT_ALLOWED,
        "bad_request",
        "method not allowed",
    )
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/auto", post(auto_segment))
        .route("/sessions/{id}/masks", post(add_mask).get(list_masks))
        .route("/sessions/{id}/masks/{mid}", get(get_mask).delete(remove_mask))
        .route("/sessions/{id}/masks/{mid}/prompts", post(refine_mask))
        .route("/sessions/{id}/masks/{mid}/prompts/last", delete(undo_prompt))
        .route("/sessions/{id}/export", get(export))
        .fallback(no_route)
        .method_not_allowed_fallback(bad_method)
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(state: Arc<AppState>) -> crate::Result<()> {
    let addr = std::net::SocketAddr::from(([0, 0, 0, 0], state.config.port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_settings() {
        let env: HashMap<&str, &str> = [
            ("CELLPILOT_PORT", "9000"),
            ("CELLPILOT_QUEUE_DEPTH", "4"),
            ("CELLPILOT_DETECTOR", "external:/bin/det --fast"),
        ]
        .into();
        let s = EnvSettings::from_lookup(|k| env.get(k).map(|v| v.to_string())).unwrap();
        assert_eq!(s.service.port, 9000);
        assert_eq!(s.service.queue_depth, 4);
        assert_eq!(
            s.detector,
            DetectorMode::External(vec!["/bin/det".into(), "--fast".into()])
        );
        assert!(s.checkpoint.is_none());
        let bad = EnvSettings::from_lookup(|k| (k == "CELLPILOT_PORT").then(|| "x".to_string()));
        assert!(matches!(bad, Err(Error::Config(_))));
        let none = EnvSettings::from_lookup(|_| None).unwrap();
        assert_eq!(none.detector, DetectorMode::Blob);
    }

    #[test]
    fn error_codes() {
        assert_eq!(ApiError::from(Error::NotFound("x".into())).code, "not_found");
        assert_eq!(ApiError::from(Error::OutOfRange("x".into())).status, 400);
        let d = ApiError::from(Error::Detector("down".into()));
        assert_eq!((d.code.as_str(), d.status), ("model_error", 503));
        assert!(d.message.contains("retry"));
        let io = ApiError::from(Error::Io(std::io::Error::other("disk")));
        assert_eq!(io.code, "io_error");
    }
}
