//! Interactive sessions and their HTTP API.
//!
//! Routes:
//!
//! | method | path                    | body / response                              |
//! |--------|-------------------------|----------------------------------------------|
//! | POST   | `/sessions`             | `{scene | scene_id, model?}` → `{session_id}` |
//! | POST   | `/sessions/:id/clicks`  | `{add: [click], remove: [index]}` → state    |
//! | GET    | `/sessions/:id/result`  | → state                                      |
//! | GET    | `/sessions/:id/scene`   | → scene document                             |
//! | GET    | `/sessions/:id/events`  | server-sent `{revision, result}` events      |
//! | GET    | `/models`               | → loaded models                              |

use std::collections::{BTreeMap, HashMap};
use std::convert::Infallible;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock, RwLock};

use axum::extract::{DefaultBodyLimit, Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, Mutex};
use tokio_stream::wrappers::BroadcastStream;
use tokio_stream::StreamExt as _;

use crate::encoder::MultiScaleFeatures;
use crate::error::{Error, Result};
use crate::io::{load_checkpoint, read_scene, LabeledScene, SceneFile};
use crate::model::ModelParams;
use crate::pipeline::{segment_with_features, PreparedScene, SegmentationResult};
use crate::sampling::{Click, ClickSet};

/// Environment variable naming the directory of `*.ckpt` files to serve.
pub const MODEL_DIR_ENV: &str = "CLICKSEG_MODEL_DIR";

/// Request bodies may carry whole scenes; a million colored points is about 100 MB of JSON.
pub const MAX_BODY_BYTES: usize = 256 << 20;

/// Loaded models keyed by id (checkpoint file stem).
#[derive(Default)]
pub struct ModelRegistry {
    models: BTreeMap<String, Arc<ModelParams>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub id: String,
    pub version: String,
    pub parameters: usize,
    pub stages: usize,
    pub num_classes: usize,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, model: ModelParams) {
        self.models.insert(id.into(), Arc::new(model));
    }

    /// Loads every `*.ckpt` in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut reg = Self::new();
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
            .collect();
        paths.sort();
        for p in paths {
            let id = p
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            reg.insert(id, load_checkpoint(&p)?);
        }
        Ok(reg)
    }

    pub fn get(&self, id: Option<&str>) -> Result<(String, Arc<ModelParams>)> {
        match id {
            Some(id) => self
                .models
                .get(id)
                .map(|m| (id.to_string(), m.clone()))
                .ok_or_else(|| Error::NotFound(format!("model {id:?}"))),
            None => self
                .models
                .iter()
                .next()
                .map(|(k, m)| (k.clone(), m.clone()))
                .ok_or_else(|| Error::NotFound("no models loaded".into())),
        }
    }

    pub fn list(&self) -> Vec<ModelInfo> {
        self.models
            .iter()
            .map(|(id, m)| ModelInfo {
                id: id.clone(),
                version: m.version.clone(),
                parameters: m.num_parameters(),
                stages: m.config.stages(),
                num_classes: m.config.num_classes,
            })
            .collect()
    }
}

/// One edit of the click list: removals (indices into the current list)
/// are applied first, then additions are appended.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClickMutation {
    pub add: Vec<Click>,
    pub remove: Vec<usize>,
}

/// Session state independent of transport.
pub struct Session {
    pub id: String,
    pub model_id: String,
    scene: Arc<LabeledScene>,
    model: Arc<ModelParams>,
    prepared: Arc<PreparedScene>,
    /// Encoder features, computed on the first forward pass.
    features: Arc<OnceLock<MultiScaleFeatures>>,
    clicks: ClickSet,
    result: Option<SegmentationResult>,
    revision: u64,
    log: Vec<ClickMutation>,
}

/// Response body for session state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub revision: u64,
    pub clicks: ClickSet,
    pub result: Option<SegmentationResult>,
}

impl Session {
    pub fn new(id: String, scene: LabeledScene, model_id: String, model: Arc<ModelParams>) -> Self {
        let prepared = Arc::new(PreparedScene::new(&scene.cloud));
        Self {
            id,
            model_id,
            scene: Arc::new(scene),
            model,
            prepared,
            features: Arc::new(OnceLock::new()),
            clicks: ClickSet::default(),
            result: None,
            revision: 0,
            log: Vec::new(),
        }
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn clicks(&self) -> &ClickSet {
        &self.clicks
    }

    pub fn result(&self) -> Option<&SegmentationResult> {
        self.result.as_ref()
    }

    pub fn scene(&self) -> &LabeledScene {
        &self.scene
    }

    pub fn log(&self) -> &[ClickMutation] {
        &self.log
    }

    pub fn state(&self) -> SessionState {
        SessionState {
            session_id: self.id.clone(),
            revision: self.revision,
            clicks: self.clicks.clone(),
            result: self.result.clone(),
        }
    }

    /// Runs the encoder now instead of on the first forward pass.
    pub fn encode(&self) -> Result<()> {
        features(&self.model, &self.prepared, &self.features).map(|_| ())
    }

    /// Validates a mutation and returns the resulting snapped click list.
    fn next_clicks(&self, m: &ClickMutation) -> Result<ClickSet> {
        let mut remove = m.remove.clone();
        remove.sort_unstable();
        remove.dedup();
        if let Some(&bad) = remove.iter().find(|&&i| i >= self.clicks.len()) {
            return Err(Error::InvalidInput(format!(
                "click index {bad} out of range (have {})",
                self.clicks.len()
            )));
        }
        let mut clicks: Vec<Click> = self
            .clicks
            .clicks
            .iter()
            .enumerate()
            .filter(|(i, _)| remove.binary_search(i).is_err())
            .map(|(_, c)| c.clone())
            .collect();
        let positions = self.scene.cloud.positions();
        for c in &m.add {
            let p = c.position();
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("click coordinate".into()));
            }
            let j = self
                .prepared
                .index
                .nearest(&self.prepared.transform.apply(&p))?;
            let mut snapped = Click::new(positions[j], c.group);
            snapped.point_index = Some(j);
            clicks.push(snapped);
        }
        Ok(ClickSet::new(clicks))
    }

    /// Applies one mutation synchronously: one forward pass unless the click
    /// list ends up empty.
    pub fn apply(&mut self, m: ClickMutation) -> Result<SessionState> {
        let clicks = self.next_clicks(&m)?;
        let result = compute(&self.model, &self.prepared, &self.features, &clicks)?;
        self.commit(m, clicks, result);
        Ok(self.state())
    }

    fn commit(&mut self, m: ClickMutation, clicks: ClickSet, result: Option<SegmentationResult>) {
        self.clicks = clicks;
        self.result = result;
        self.revision += 1;
        self.log.push(m);
    }
}

fn compute(
    model: &ModelParams,
    prepared: &PreparedScene,
    cell: &OnceLock<MultiScaleFeatures>,
    clicks: &ClickSet,
) -> Result<Option<SegmentationResult>> {
    if clicks.is_empty() {
        return Ok(None);
    }
    let feats = features(model, prepared, cell)?;
    segment_with_features(model, prepared, feats, clicks).map(Some)
}

fn features<'a>(
    model: &ModelParams,
    prepared: &PreparedScene,
    cell: &'a OnceLock<MultiScaleFeatures>,
) -> Result<&'a MultiScaleFeatures> {
    if let Some(f) = cell.get() {
        return Ok(f);
    }
    let f = model.encoder.encode(&model.store, &prepared.normalized)?;
    Ok(cell.get_or_init(|| f))
}

/// Re-applies a click log to a fresh session over the same scene and model.
pub fn replay(
    scene: &LabeledScene,
    model: Arc<ModelParams>,
    log: &[ClickMutation],
) -> Result<SessionState> {
    let mut s = Session::new("replay".into(), scene.clone(), "replay".into(), model);
    for m in log {
        s.apply(m.clone())?;
    }
    Ok(s.state())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionEvent {
    pub revision: u64,
    pub result: Option<SegmentationResult>,
}

struct SessionSlot {
    session: Mutex<Session>,
    events: broadcast::Sender<SessionEvent>,
}

/// Shared state behind the router.
pub struct AppState {
    registry: ModelRegistry,
    sessions: RwLock<HashMap<String, Arc<SessionSlot>>>,
    next_id: AtomicU64,
    scene_dir: Option<PathBuf>,
    log_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Clone)]
pub struct ServiceConfig {
    /// Directory scenes referenced by `scene_id` are read from.
    pub scene_dir: Option<PathBuf>,
    /// When set, each session's click log is written here after every mutation.
    pub log_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(registry: ModelRegistry, cfg: ServiceConfig) -> Self {
        Self {
            registry,
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            scene_dir: cfg.scene_dir,
            log_dir: cfg.log_dir,
        }
    }

    fn slot(&self, id: &str) -> Result<Arc<SessionSlot>> {
        self.sessions
            .read()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("session {id:?}")))
    }
}

#[derive(Debug, Deserialize)]
struct CreateSession {
    scene: Option<SceneFile>,
    scene_id: Option<String>,
    model: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
    pub revision: u64,
    pub model: String,
    pub num_points: usize,
}

struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = match &self.0 {
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::Json(_) | Error::Parse(_) => (StatusCode::BAD_REQUEST, "malformed"),
            Error::Io(_) | Error::Checkpoint(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
            _ => (StatusCode::UNPROCESSABLE_ENTITY, "invalid"),
        };
        let body = serde_json::json!({ "error": { "code": code, "message": self.0.to_string() } });
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn parse_body<T: for<'de> Deserialize<'de>>(body: &str) -> Result<T> {
    Ok(serde_json::from_str(body)?)
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    body: String,
) -> ApiResult<Json<Created>> {
    let req: CreateSession = parse_body(&body)?;
    let (model_id, model) = app.registry.get(req.model.as_deref())?;
    let id = app.next_id.fetch_add(1, Ordering::Relaxed);
    let session_id = format!("s{id}");
    let scene = match (req.scene, req.scene_id) {
        (Some(file), _) => file.into_scene(session_id.clone())?,
        (None, Some(name)) => {
            let dir = app
                .scene_dir
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("no scene directory configured".into()))?;
            if name.contains('/') || name.contains('\\') || name.starts_with('.') {
                return Err(Error::InvalidInput(format!("bad scene id {name:?}")).into());
            }
            let path = dir.join(format!("{name}.json"));
            if !path.exists() {
                return Err(Error::NotFound(format!("scene {name:?}")).into());
            }
            read_scene(&path)?
        }
        (None, None) => {
            return Err(Error::InvalidInput("either scene or scene_id is required".into()).into())
        }
    };
    if scene.cloud.colors().is_none() && model.config.use_colors {
        return Err(
            Error::InvalidInput("model requires colors but the scene has none".into()).into(),
        );
    }
    let n = scene.len();
    let session = tokio::task::spawn_blocking({
        let (sid, mid) = (session_id.clone(), model_id.clone());
        move || {
            let s = Session::new(sid, scene, mid, model);
            s.encode()?;
            Ok::<_, Error>(s)
        }
    })
    .await
    .map_err(|e| Error::InvalidInput(format!("session setup failed: {e}")))??;
    let (events, _) = broadcast::channel(16);
    app.sessions
        .write()
        .expect("session table poisoned")
        .insert(
            session_id.clone(),
            Arc::new(SessionSlot {
                session: Mutex::new(session),
                events,
            }),
        );
    Ok(Json(Created {
        session_id,
        revision: 0,
        model: model_id,
        num_points: n,
    }))
}

async fn apply_clicks(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: String,
) -> ApiResult<Json<SessionState>> {
    let mutation: ClickMutation = parse_body(&body)?;
    let slot = app.slot(&id)?;
    // one in-flight computation per session
    let mut session = slot.session.lock().await;
    let clicks = session.next_clicks(&mutation)?;
    let (model, prepared, features) = (
        session.model.clone(),
        session.prepared.clone(),
        session.features.clone(),
    );
    let compute_clicks = clicks.clone();
    let result =
        tokio::task::spawn_blocking(move || compute(&model, &prepared, &features, &compute_clicks))
            .await
            .map_err(|e| Error::InvalidInput(format!("segmentation task failed: {e}")))??;
    session.commit(mutation, clicks, result);
    let state = session.state();
    if let Some(dir) = &app.log_dir {
        let path = dir.join(format!("{}.clicks.json", session.id));
        std::fs::write(
            path,
            serde_json::to_string(session.log()).map_err(Error::from)?,
        )
        .map_err(Error::from)?;
    }
    let _ = slot.events.send(SessionEvent {
        revision: state.revision,
        result: state.result.clone(),
    });
    Ok(Json(state))
}

async fn get_result(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<SessionState>> {
    let slot = app.slot(&id)?;
    let session = slot.session.lock().await;
    Ok(Json(session.state()))
}

async fn get_scene(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<SceneFile>> {
    let slot = app.slot(&id)?;
    let session = slot.session.lock().await;
    let mut file = SceneFile::from_scene(session.scene());
    // ground truth stays on the server
    file.instance_ids = None;
    file.class_ids = None;
    Ok(Json(file))
}

async fn events(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Sse<impl Stream<Item = std::result::Result<Event, Infallible>>>> {
    let slot = app.slot(&id)?;
    let rx = slot.events.subscribe();
    let stream = BroadcastStream::new(rx).filter_map(|msg| {
        msg.ok()
            .and_then(|ev| Event::default().event("result").json_data(ev).ok())
            .map(Ok)
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

async fn list_models(State(app): State<Arc<AppState>>) -> Json<Vec<ModelInfo>> {
    Json(app.registry.list())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/:id/clicks", post(apply_clicks))
        .route("/sessions/:id/result", get(get_result))
        .route("/sessions/:id/scene", get(get_scene))
        .route("/sessions/:id/events", get(events))
        .route("/models", get(list_models))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

/// Binds and serves until the process is stopped.
pub async fn serve(addr: std::net::SocketAddr, state: Arc<AppState>) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synthdata::{generate_scene, SceneSpec};

    fn setup() -> (LabeledScene, Arc<ModelParams>) {
        let scene = generate_scene(&SceneSpec {
            instances: (3, 3),
            points_per_instance: (30, 40),
            floor_points: 30,
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        let model = ModelParams::new(ModelConfig {
            num_classes: 8,
            num_prototypes: 8,
            ..ModelConfig::tiny(2)
        })
        .unwrap();
        (scene, Arc::new(model))
    }

    #[test]
    fn add_then_remove_restores_state() {
        let (scene, model) = setup();
        let mut s = Session::new("a".into(), scene.clone(), "m".into(), model);
        let p = scene.cloud.positions()[5];
        let st = s
            .apply(ClickMutation {
                add: vec![Click::new(p, 0)],
                remove: vec![],
            })
            .unwrap();
        assert_eq!(st.revision, 1);
        assert_eq!(st.result.as_ref().unwrap().groups, vec![0]);
        let st = s
            .apply(ClickMutation {
                add: vec![],
                remove: vec![0],
            })
            .unwrap();
        assert_eq!(st.revision, 2);
        assert!(st.result.is_none());
        assert!(st.clicks.is_empty());
        assert!(s
            .apply(ClickMutation {
                add: vec![],
                remove: vec![3]
            })
            .is_err());
        assert_eq!(s.revision(), 2);
    }

    #[test]
    fn clicks_snap_to_scene_points() {
        let (scene, model) = setup();
        let mut s = Session::new("a".into(), scene.clone(), "m".into(), model);
        let p = scene.cloud.positions()[7];
        let st = s
            .apply(ClickMutation {
                add: vec![Click::new([p[0] + 1e-4, p[1], p[2]], 2)],
                remove: vec![],
            })
            .unwrap();
        assert_eq!(st.clicks.clicks[0].position(), p);
    }

    #[test]
    fn registry_lookup() {
        let (_, model) = setup();
        let mut r = ModelRegistry::new();
        assert!(r.get(None).is_err());
        r.insert("tiny", (*model).clone());
        assert_eq!(r.get(None).unwrap().0, "tiny");
        assert!(r.get(Some("other")).is_err());
        assert_eq!(r.list()[0].stages, 2);
    }
}
