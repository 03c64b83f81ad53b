//! In-memory session service over HTTP/JSON.
//!
//! Requests on one session are serialized by its mutex; different sessions
//! proceed concurrently. Simulation runs on the blocking pool.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use shelfpick_core::image::{DepthImage, Grid, InstanceImage, BACKGROUND_ID};
use shelfpick_core::perception::{mask_centroid, match_clusters_to_objects, segment_region_growing, SegmentationResult};
use shelfpick_core::planner::{
    attach_object_ids, enumerate_candidates, score_candidate, select_action, ActionCandidate, CollapsePredictor,
    OraclePredictor, PlanMode, PlanResult, PlannerError, RegionAreas,
};
use shelfpick_core::render::render;
use shelfpick_core::sim::{
    generate_scene, scene_from_json, scene_to_json, simulate_extraction, Displacement, ObjectId, Scene, SimError,
};
use shelfpick_neural::{Checkpoint, LearnedPredictor};

use crate::config::{Config, PredictorKind};

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl From<PlannerError> for ApiError {
    fn from(e: PlannerError) -> Self {
        let code = match e {
            PlannerError::UnknownCluster(_) => "unknown_cluster",
            PlannerError::NoCandidates => "no_candidates",
            PlannerError::AllUnreachable => "all_unreachable",
            PlannerError::ShapeMismatch(_) => "shape_mismatch",
            PlannerError::Predictor(_) => "predictor",
        };
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, e.to_string())
    }
}

impl From<SimError> for ApiError {
    fn from(e: SimError) -> Self {
        let code = match e {
            SimError::PlacementFailed { .. } => "placement_failed",
            _ => "simulation",
        };
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

#[derive(Serialize, Deserialize)]
struct ErrorBody {
    error: String,
    message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { error: self.code.into(), message: self.message };
        (self.status, Json(body)).into_response()
    }
}

/// Binary PGM image, base64 encoded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagePayload {
    pub width: usize,
    pub height: usize,
    /// `pgm8` or `pgm16`.
    pub format: String,
    pub data: String,
}

impl ImagePayload {
    fn pgm8(g: &Grid<u8>) -> Self {
        Self::encode(g.width, g.height, "pgm8", &g.to_pgm())
    }

    fn depth(d: &DepthImage) -> Self {
        Self::encode(d.width, d.height, "pgm16", &d.depth_to_pgm16())
    }

    fn encode(width: usize, height: usize, format: &str, bytes: &[u8]) -> Self {
        Self {
            width,
            height,
            format: format.into(),
            data: base64::engine::general_purpose::STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Option<Vec<u8>> {
        base64::engine::general_purpose::STANDARD.decode(&self.data).ok()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterView {
    pub index: usize,
    pub object_id: Option<ObjectId>,
    pub area: usize,
    /// (row, col)
    pub centroid: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub extract: usize,
    pub support: Option<usize>,
    pub extract_id: ObjectId,
    pub support_id: Option<ObjectId>,
    pub success: bool,
    pub collapsed_ids: Vec<ObjectId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub seed: u64,
    /// Number of executed actions.
    pub step: usize,
    pub object_count: usize,
    pub scene: serde_json::Value,
    pub depth: ImagePayload,
    pub instances: ImagePayload,
    /// Cluster index per pixel, 255 where no cluster.
    pub cluster_map: ImagePayload,
    pub clusters: Vec<ClusterView>,
    pub log: Vec<LogEntry>,
    pub checkpoint: Option<PathBuf>,
    pub config: Config,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    #[serde(default)]
    pub config: Option<serde_json::Value>,
    pub seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionRequest {
    pub extract: usize,
    #[serde(default)]
    pub support: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanRequest {
    pub mode: String,
    #[serde(default)]
    pub extract: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhatIfResponse {
    pub extract: usize,
    pub support: Option<usize>,
    pub r_c: f64,
    pub areas: RegionAreas,
    /// Class codes 0..=3 (E, S, C, B) per pixel.
    pub label: ImagePayload,
    /// Mean predicted probability per class in E, S, C, B order.
    pub mean_probabilities: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeView {
    pub extract_id: ObjectId,
    pub support_id: Option<ObjectId>,
    pub collapsed_ids: Vec<ObjectId>,
    pub displacements: Vec<Displacement>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecuteResponse {
    pub step: usize,
    pub success: bool,
    pub outcome: OutcomeView,
    pub state: SessionView,
}

struct Perception {
    depth: DepthImage,
    instances: InstanceImage,
    seg: SegmentationResult,
    cluster_ids: Vec<Option<ObjectId>>,
}

impl Perception {
    fn of(scene: &Scene, config: &Config) -> Self {
        let (depth, instances) = render(scene, &config.camera_spec());
        let seg = segment_region_growing(&depth, &config.segmentation_params());
        let cluster_ids = match_clusters_to_objects(&seg, &instances);
        Self { depth, instances, seg, cluster_ids }
    }
}

struct Shared<'a>(&'a LearnedPredictor);

impl CollapsePredictor for Shared<'_> {
    fn predict(
        &self,
        depth: &DepthImage,
        mask_e: &shelfpick_core::image::MaskImage,
        mask_s: &shelfpick_core::image::MaskImage,
    ) -> Result<shelfpick_core::planner::PredictionMap, PlannerError> {
        self.0.predict(depth, mask_e, mask_s)
    }
}

pub struct Session {
    pub id: String,
    pub seed: u64,
    pub config: Config,
    pub scene: Scene,
    pub log: Vec<LogEntry>,
    learned: Option<Arc<LearnedPredictor>>,
    perception: Perception,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    id: String,
    seed: u64,
    config: Config,
    scene: String,
    log: Vec<LogEntry>,
}

impl Session {
    fn new(id: String, seed: u64, config: Config, scene: Scene, learned: Option<Arc<LearnedPredictor>>) -> Self {
        let perception = Perception::of(&scene, &config);
        Self { id, seed, config, scene, log: Vec::new(), learned, perception }
    }

    pub fn view(&self) -> SessionView {
        let p = &self.perception;
        let mut cluster_map = Grid::new(p.depth.width, p.depth.height, BACKGROUND_ID);
        for (k, m) in p.seg.clusters.iter().enumerate() {
            for (dst, &v) in cluster_map.data.iter_mut().zip(&m.data) {
                if v != 0 {
                    *dst = k.min(254) as u8;
                }
            }
        }
        let clusters = p
            .seg
            .clusters
            .iter()
            .enumerate()
            .map(|(index, m)| {
                let (r, c) = mask_centroid(m).expect("clusters are nonempty");
                ClusterView { index, object_id: p.cluster_ids[index], area: m.count(|&v| v != 0), centroid: [r, c] }
            })
            .collect();
        SessionView {
            id: self.id.clone(),
            seed: self.seed,
            step: self.log.len(),
            object_count: self.scene.objects.len(),
            scene: serde_json::from_str(&scene_to_json(&self.scene)).expect("scene JSON parses"),
            depth: ImagePayload::depth(&p.depth),
            instances: ImagePayload::pgm8(&p.instances),
            cluster_map: ImagePayload::pgm8(&cluster_map),
            clusters,
            log: self.log.clone(),
            checkpoint: self.config.planner.checkpoint.clone(),
            config: self.config.clone(),
        }
    }

    fn predictor(&self) -> Result<Box<dyn CollapsePredictor + '_>, ApiError> {
        match self.config.planner.predictor {
            PredictorKind::Oracle => Ok(Box::new(OraclePredictor::new(
                self.scene.clone(),
                self.perception.instances.clone(),
                self.config.sim,
            ))),
            PredictorKind::Learned => match &self.learned {
                Some(p) => Ok(Box::new(Shared(p.as_ref()))),
                None => Err(ApiError::new(
                    StatusCode::CONFLICT,
                    "no_checkpoint",
                    "the learned predictor needs a checkpoint",
                )),
            },
        }
    }

    fn check_clusters(&self, extract: usize, support: Option<usize>) -> Result<(), ApiError> {
        let n = self.perception.seg.count();
        for k in std::iter::once(extract).chain(support) {
            if k >= n {
                return Err(PlannerError::UnknownCluster(k).into());
            }
        }
        if support == Some(extract) {
            return Err(ApiError::bad_request("extract and support must be different clusters"));
        }
        Ok(())
    }

    fn candidate(&self, extract: usize, support: Option<usize>) -> Result<ActionCandidate, ApiError> {
        self.check_clusters(extract, support)?;
        let centroid = |k: usize| mask_centroid(&self.perception.seg.clusters[k]).expect("nonempty");
        let mut c = [ActionCandidate {
            extract,
            support,
            extract_id: None,
            support_id: None,
            extract_point: centroid(extract),
            support_point: support.map(centroid),
        }];
        attach_object_ids(&mut c, &self.perception.cluster_ids);
        let [c] = c;
        Ok(c)
    }

    /// Scores one action without touching the scene.
    pub fn what_if(&self, extract: usize, support: Option<usize>) -> Result<WhatIfResponse, ApiError> {
        let candidate = self.candidate(extract, support)?;
        let predictor = self.predictor()?;
        let p = &self.perception;
        let (map, label, r_c) =
            score_candidate(&candidate, &p.seg, &p.depth, predictor.as_ref(), self.config.planner.threshold)?;
        let n = map.probs.len().max(1) as f64;
        let mean_probabilities =
            std::array::from_fn(|c| map.probs.iter().map(|px| f64::from(px[c])).sum::<f64>() / n);
        Ok(WhatIfResponse {
            extract,
            support,
            r_c,
            areas: RegionAreas::of(&label),
            label: ImagePayload::pgm8(&label.to_codes()),
            mean_probabilities,
        })
    }

    pub fn plan(&self, mode: PlanMode) -> Result<PlanResult, ApiError> {
        let p = &self.perception;
        let mut candidates = enumerate_candidates(&p.seg, mode)?;
        attach_object_ids(&mut candidates, &p.cluster_ids);
        let predictor = self.predictor()?;
        let reachable = |c: &ActionCandidate| c.resolved();
        Ok(select_action(&candidates, predictor.as_ref(), &p.seg, &p.depth, &reachable, self.config.planner.threshold)?)
    }

    /// Runs the action on the scene and advances to the settled result.
    pub fn execute(&mut self, extract: usize, support: Option<usize>) -> Result<(usize, bool, OutcomeView), ApiError> {
        let candidate = self.candidate(extract, support)?;
        if !candidate.resolved() {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "unresolved_cluster",
                "a selected cluster does not correspond to a distinct object",
            ));
        }
        let extract_id = candidate.extract_id.expect("resolved");
        let outcome = simulate_extraction(&self.scene, extract_id, candidate.support_id, &self.config.sim)?;
        let success = outcome.final_scene.object(extract_id).is_none() && outcome.collapsed_ids.is_empty();
        let step = self.log.len() + 1;
        self.log.push(LogEntry {
            step,
            extract,
            support,
            extract_id,
            support_id: candidate.support_id,
            success,
            collapsed_ids: outcome.collapsed_ids.clone(),
        });
        self.scene = outcome.final_scene;
        self.perception = Perception::of(&self.scene, &self.config);
        let view = OutcomeView {
            extract_id,
            support_id: candidate.support_id,
            collapsed_ids: outcome.collapsed_ids,
            displacements: outcome.displacements,
        };
        Ok((step, success, view))
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            id: self.id.clone(),
            seed: self.seed,
            config: self.config.clone(),
            scene: scene_to_json(&self.scene),
            log: self.log.clone(),
        }
    }
}

pub struct AppState {
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
    default_config: Config,
    learned: Option<Arc<LearnedPredictor>>,
    snapshot_dir: Option<PathBuf>,
}

fn load_learned(path: &Path) -> Result<Arc<LearnedPredictor>, ApiError> {
    let ckpt = Checkpoint::load(path)
        .map_err(|e| ApiError::bad_request(format!("checkpoint {}: {e}", path.display())))?;
    let p = LearnedPredictor::from_checkpoint(&ckpt).map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(Arc::new(p))
}

impl AppState {
    pub fn new(default_config: Config) -> Self {
        Self {
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            default_config,
            learned: None,
            snapshot_dir: None,
        }
    }

    /// Loads the service-wide checkpoint used by sessions that name none.
    pub fn with_checkpoint(mut self, path: &Path) -> anyhow::Result<Self> {
        self.learned = Some(load_learned(path).map_err(|e| anyhow::anyhow!(e.message))?);
        Ok(self)
    }

    /// Persists sessions under `dir` and restores any found there.
    pub fn with_snapshots(mut self, dir: &Path) -> anyhow::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut max_id = 0;
        let mut sessions = HashMap::new();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let snap: Snapshot = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
            let scene = scene_from_json(&snap.scene, &snap.config.sim.material)?;
            let learned = self.learned_for(&snap.config).map_err(|e| anyhow::anyhow!(e.message))?;
            if let Some(n) = snap.id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()) {
                max_id = max_id.max(n);
            }
            let mut session = Session::new(snap.id.clone(), snap.seed, snap.config, scene, learned);
            session.log = snap.log;
            sessions.insert(snap.id, Arc::new(Mutex::new(session)));
        }
        self.sessions = RwLock::new(sessions);
        self.next_id = AtomicU64::new(max_id + 1);
        self.snapshot_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    fn learned_for(&self, config: &Config) -> Result<Option<Arc<LearnedPredictor>>, ApiError> {
        match &config.planner.checkpoint {
            Some(path) => load_learned(path).map(Some),
            None => Ok(self.learned.clone()),
        }
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .read()
            .expect("session table lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session {id}")))
    }

    fn persist(&self, session: &Session) -> Result<(), ApiError> {
        let Some(dir) = &self.snapshot_dir else { return Ok(()) };
        let text = serde_json::to_string(&session.snapshot()).expect("snapshot serializes");
        let tmp = dir.join(format!("{}.json.tmp", session.id));
        std::fs::write(&tmp, text)
            .and_then(|_| std::fs::rename(&tmp, dir.join(format!("{}.json", session.id))))
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "persistence", e.to_string()))
    }

    pub fn plan_session(&self, id: &str, mode: PlanMode) -> Result<PlanResult, ApiError> {
        let session = self.session(id)?;
        let s = lock(&session);
        s.plan(mode)
    }

    pub fn create_session(&self, config: Config, seed: u64) -> Result<SessionView, ApiError> {
        let s = &config.scene;
        let scene = generate_scene(&s.shelf, s.object_set, s.object_count, seed, &config.sim)?;
        let learned = self.learned_for(&config)?;
        let id = format!("s{}", self.next_id.fetch_add(1, Ordering::SeqCst));
        let session = Session::new(id.clone(), seed, config, scene, learned);
        self.persist(&session)?;
        let view = session.view();
        self.sessions.write().expect("session table lock").insert(id, Arc::new(Mutex::new(session)));
        Ok(view)
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

fn lock(session: &Mutex<Session>) -> std::sync::MutexGuard<'_, Session> {
    // A panic mid-request leaves the session as it was before the mutation.
    session.lock().unwrap_or_else(|e| e.into_inner())
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn create(
    State(state): State<Arc<AppState>>,
    body: Result<Json<CreateRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let Json(req) = body?;
    let config = match req.config {
        Some(v) => Config::from_value(v).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_config", e.to_string()))?,
        None => state.default_config.clone(),
    };
    let view = blocking(move || state.create_session(config, req.seed)).await?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn read(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionView>, ApiError> {
    let session = state.session(&id)?;
    Ok(Json(blocking(move || Ok(lock(&session).view())).await?))
}

async fn what_if(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<ActionRequest>, JsonRejection>,
) -> Result<Json<WhatIfResponse>, ApiError> {
    let Json(req) = body?;
    let session = state.session(&id)?;
    Ok(Json(blocking(move || lock(&session).what_if(req.extract, req.support)).await?))
}

async fn plan(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<PlanRequest>, JsonRejection>,
) -> Result<Json<PlanResult>, ApiError> {
    let Json(req) = body?;
    let mode = match (req.mode.as_str(), req.extract) {
        ("safest", None) => PlanMode::Safest,
        ("fixed_target" | "fixed", Some(e)) => PlanMode::FixedTarget(e),
        ("fixed_target" | "fixed", None) => return Err(ApiError::bad_request("fixed_target mode needs an extract cluster")),
        ("safest", Some(_)) => return Err(ApiError::bad_request("safest mode takes no extract cluster")),
        (m, _) => return Err(ApiError::bad_request(format!("unknown mode {m:?}"))),
    };
    let session = state.session(&id)?;
    Ok(Json(blocking(move || lock(&session).plan(mode)).await?))
}

async fn execute(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<ActionRequest>, JsonRejection>,
) -> Result<Json<ExecuteResponse>, ApiError> {
    let Json(req) = body?;
    let session = state.session(&id)?;
    let response = blocking(move || {
        let mut s = lock(&session);
        let (step, success, outcome) = s.execute(req.extract, req.support)?;
        state.persist(&s)?;
        Ok(ExecuteResponse { step, success, outcome, state: s.view() })
    })
    .await?;
    Ok(Json(response))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(read))
        .route("/sessions/{id}/whatif", post(what_if))
        .route("/sessions/{id}/plan", post(plan))
        .route("/sessions/{id}/execute", post(execute))
        .with_state(state)
}

pub async fn serve(addr: &str, state: AppState) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await?;
    Ok(())
}
