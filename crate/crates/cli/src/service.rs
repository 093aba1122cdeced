//! HTTP service over a project store. Pipeline jobs run in the background;
//! clients poll `/jobs/{job_id}`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use seedprop_core::format::read_seed_file;
use seedprop_core::pipeline::{load_detections, EvalSummary, PipelineError, RunOptions, RunPaths};
use seedprop_core::store::{frame_stem, JobStatus, StoreError, PROPAGATED_DIR, REPORTS_DIR};
use seedprop_core::{
    run_pipeline, Backends, FrameLabels, ImageGeometry, JobRecord, PipelineConfig, Project, ProjectStore, Provenance,
    SeedAnnotation, Stage, TrackSet,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

/// Seed window length when a request does not give one.
pub const DEFAULT_PAIR_FRAMES: u32 = 30;

#[derive(Debug, Clone, Serialize)]
pub struct ServiceJob {
    pub job_id: String,
    pub project_id: String,
    pub stage: Stage,
    pub run_id: String,
    pub status: JobStatus,
    /// Stage records of the chain so far, with wall seconds.
    pub stages: Vec<JobRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<EvalSummary>,
}

pub struct AppState {
    store: Arc<ProjectStore>,
    token: Option<String>,
    jobs: Mutex<HashMap<String, ServiceJob>>,
    chains: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    seq: AtomicU64,
}

impl AppState {
    pub fn new(store: ProjectStore, token: Option<String>) -> Arc<Self> {
        Arc::new(Self {
            store: Arc::new(store),
            token,
            jobs: Mutex::new(HashMap::new()),
            chains: Mutex::new(HashMap::new()),
            seq: AtomicU64::new(0),
        })
    }

    fn chain_lock(&self, project_id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.chains
            .lock()
            .unwrap()
            .entry(project_id.to_string())
            .or_default()
            .clone()
    }

    fn update(&self, job_id: &str, f: impl FnOnce(&mut ServiceJob)) {
        if let Some(j) = self.jobs.lock().unwrap().get_mut(job_id) {
            f(j);
        }
    }
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let code = match &e {
            StoreError::NotFound(_) => StatusCode::NOT_FOUND,
            StoreError::DuplicateProject(_) | StoreError::Locked(_) => StatusCode::CONFLICT,
            StoreError::InvalidName(_) | StoreError::Invalid(_) | StoreError::Model(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

fn bad(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

fn not_found(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, msg.into())
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/projects", post(create_project))
        .route("/projects/{id}", get(get_project))
        .route("/projects/{id}/frames", post(upload_frames))
        .route("/projects/{id}/frames/{n}", get(get_frame))
        .route("/projects/{id}/seeds", post(post_seed).get(get_seeds))
        .route("/projects/{id}/jobs", post(post_job))
        .route("/jobs/{job_id}", get(get_job))
        .route("/projects/{id}/labels/{stage}/{frame}", get(get_labels))
        .route("/projects/{id}/reports/{report_id}", get(get_report))
        .layer(middleware::from_fn_with_state(state.clone(), auth))
        .layer(DefaultBodyLimit::max(256 << 20))
        .with_state(state)
}

async fn auth(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError(StatusCode::UNAUTHORIZED, "missing or wrong bearer token".into()).into_response();
        }
    }
    next.run(req).await
}

#[derive(Debug, Deserialize)]
struct NewProject {
    project_id: String,
    geometry: ImageGeometry,
    frame_count: u32,
    class_names: Vec<String>,
}

async fn create_project(State(s): State<Arc<AppState>>, Json(body): Json<NewProject>) -> ApiResult<(StatusCode, Json<Project>)> {
    let p = s
        .store
        .create_project(&body.project_id, body.geometry, body.frame_count, body.class_names)?;
    Ok((StatusCode::CREATED, Json(p)))
}

async fn get_project(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Project>> {
    Ok(Json(s.store.load(&id)?))
}

/// Frame index and extension from an upload: the file name's stem and
/// extension, or the field name with a PNG extension.
fn frame_target(field: Option<&str>, file: Option<&str>) -> Option<(u32, String)> {
    if let Some(file) = file {
        let p = Path::new(file);
        let index = p.file_stem()?.to_str()?.parse().ok()?;
        let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("png");
        return Some((index, ext.to_string()));
    }
    Some((field?.parse().ok()?, "png".into()))
}

async fn upload_frames(
    State(s): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    mut form: Multipart,
) -> ApiResult<Json<serde_json::Value>> {
    let project = s.store.load(&id)?;
    let mut stored = Vec::new();
    while let Some(field) = form.next_field().await.map_err(|e| bad(e.to_string()))? {
        let (index, ext) = frame_target(field.name(), field.file_name())
            .ok_or_else(|| bad("each part needs a numeric file name or field name"))?;
        let bytes = field.bytes().await.map_err(|e| bad(e.to_string()))?;
        s.store.put_frame(&project, index, &ext, &bytes)?;
        stored.push(index);
    }
    if stored.is_empty() {
        return Err(bad("no frames in upload"));
    }
    Ok(Json(json!({ "stored": stored })))
}

async fn get_frame(
    State(s): State<Arc<AppState>>,
    UrlPath((id, n)): UrlPath<(String, u32)>,
) -> ApiResult<(HeaderMap, Bytes)> {
    s.store.load(&id)?;
    let path = s
        .store
        .frame_path(&id, n)
        .ok_or_else(|| not_found(format!("no image for frame {n}")))?;
    let bytes = tokio::fs::read(&path).await.map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let mime = match path.extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    };
    let mut h = HeaderMap::new();
    h.insert(header::CONTENT_TYPE, mime.parse().unwrap());
    Ok((h, Bytes::from(bytes)))
}

#[derive(Debug, Deserialize)]
struct SeedQuery {
    frame_count: Option<u32>,
}

async fn post_seed(
    State(s): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<SeedQuery>,
    body: String,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    // Accept the seed file format or a bare annotation.
    let seed = match read_seed_file(&body) {
        Ok(seed) => seed,
        Err(first) => {
            let seed: SeedAnnotation = serde_json::from_str(&body).map_err(|_| bad(first))?;
            seed.validate().map_err(|e| bad(e.to_string()))?;
            seed
        }
    };
    let store = s.store.clone();
    let _lock = store.lock(&id)?;
    let mut project = store.load(&id)?;
    let pair = project.add_seed(seed, q.frame_count.unwrap_or(DEFAULT_PAIR_FRAMES))?;
    store.save(&project)?;
    Ok((StatusCode::CREATED, Json(json!({ "pair": pair }))))
}

async fn get_seeds(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<serde_json::Value>> {
    let project = s.store.load(&id)?;
    Ok(Json(json!({ "pairs": project.pairs })))
}

#[derive(Debug, Deserialize)]
struct JobSubmit {
    stage: Stage,
    config: PipelineConfig,
}

async fn post_job(
    State(s): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<JobSubmit>,
) -> ApiResult<(StatusCode, Json<ServiceJob>)> {
    s.store.load(&id)?;
    body.config.validate().map_err(|e| bad(e.to_string()))?;
    let job_id = format!("{id}-{}", s.seq.fetch_add(1, Ordering::Relaxed) + 1);
    let job = ServiceJob {
        job_id: job_id.clone(),
        project_id: id.clone(),
        stage: body.stage,
        run_id: body.config.run_id(),
        status: JobStatus::Pending,
        stages: Vec::new(),
        error: None,
        summary: None,
    };
    s.jobs.lock().unwrap().insert(job_id.clone(), job.clone());

    let state = s.clone();
    tokio::spawn(async move {
        // One chain per project at a time; later jobs wait here as Pending.
        let chain = state.chain_lock(&id);
        let _held = chain.lock().await;
        state.update(&job_id, |j| j.status = JobStatus::Running);
        let store = state.store.clone();
        let config = body.config;
        let stage = body.stage;
        let res = tokio::task::spawn_blocking(move || -> Result<_, PipelineError> {
            let backends = Backends::from_config(&config.backends)?;
            run_pipeline(&store, &id, &config, &backends, RunOptions { stop_after: Some(stage) })
        })
        .await;
        state.update(&job_id, |j| match res {
            Ok(Ok(out)) => {
                j.status = JobStatus::Done;
                j.stages = out.jobs;
                j.summary = out.summary;
            }
            Ok(Err(e)) => {
                j.status = JobStatus::Failed;
                j.error = Some(e.to_string());
            }
            Err(e) => {
                j.status = JobStatus::Failed;
                j.error = Some(format!("job panicked: {e}"));
            }
        });
    });
    Ok((StatusCode::ACCEPTED, Json(job)))
}

async fn get_job(State(s): State<Arc<AppState>>, UrlPath(job_id): UrlPath<String>) -> ApiResult<Json<ServiceJob>> {
    s.jobs
        .lock()
        .unwrap()
        .get(&job_id)
        .cloned()
        .map(Json)
        .ok_or_else(|| not_found(format!("no job `{job_id}`")))
}

#[derive(Debug, Deserialize)]
struct RunQuery {
    run: Option<String>,
}

/// Most recently written run directory under `dir`.
fn latest_run(dir: &Path) -> Option<String> {
    std::fs::read_dir(dir)
        .ok()?
        .flatten()
        .filter(|e| e.path().is_dir() && !e.file_name().to_string_lossy().ends_with(".partial"))
        .max_by_key(|e| e.metadata().and_then(|m| m.modified()).ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> ApiResult<T> {
    let text = std::fs::read_to_string(path).map_err(|_| not_found(format!("{} not found", path.display())))?;
    serde_json::from_str(&text).map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

/// Labels of one frame at a pipeline stage: `propagated`, `fitted` or
/// `inferred`.
pub fn stage_labels(store: &ProjectStore, project: &Project, stage: &str, frame: u32, run: Option<&str>) -> Result<FrameLabels, String> {
    let dir = store.project_dir(&project.project_id);
    let run = match run {
        Some(r) => r.to_string(),
        None => latest_run(&dir.join(PROPAGATED_DIR)).ok_or("no runs yet")?,
    };
    let paths = RunPaths::new(&dir, &run);
    match stage {
        "propagated" | "propagate" => {
            let (k, _) = project
                .pairs
                .iter()
                .enumerate()
                .find(|(_, p)| p.frame_range().contains(&frame))
                .ok_or_else(|| format!("frame {frame} is in no seeded pair"))?;
            let set: TrackSet = read_json(&paths.tracks.join(format!("pair_{k}.json"))).map_err(|e| e.1)?;
            set.to_frame_labels()
                .into_iter()
                .find(|l| l.frame_index == frame)
                .ok_or_else(|| format!("frame {frame} not propagated in run {run}"))
        }
        "fitted" | "segment" => {
            read_json(&paths.fitted.join(format!("{}.json", frame_stem(frame)))).map_err(|e| e.1)
        }
        "inferred" | "infer" => {
            if !paths.inferred.is_dir() {
                return Err(format!("run {run} has no inference output"));
            }
            let dets = load_detections(&paths.inferred, Some(project.class_names.len())).map_err(|e| e.to_string())?;
            let boxes = dets
                .get(&frame)
                .map(|d| d.iter().map(|d| d.norm_box).collect())
                .unwrap_or_default();
            Ok(FrameLabels {
                boxes,
                ..FrameLabels::empty(frame, Provenance::Inferred)
            })
        }
        other => Err(format!("unknown label stage `{other}` (propagated|fitted|inferred)")),
    }
}

async fn get_labels(
    State(s): State<Arc<AppState>>,
    UrlPath((id, stage, frame)): UrlPath<(String, String, u32)>,
    Query(q): Query<RunQuery>,
) -> ApiResult<Json<FrameLabels>> {
    let project = s.store.load(&id)?;
    stage_labels(&s.store, &project, &stage, frame, q.run.as_deref())
        .map(Json)
        .map_err(not_found)
}

/// A run's evaluation summary, or a sweep's table.
pub fn report_path(store: &ProjectStore, project_id: &str, report_id: &str) -> Option<PathBuf> {
    if report_id.is_empty() || report_id.contains(['/', '\\', '.']) {
        return None;
    }
    let dir = store.project_dir(project_id).join(REPORTS_DIR).join(report_id);
    ["eval.json", "table.json"].iter().map(|f| dir.join(f)).find(|p| p.is_file())
}

async fn get_report(
    State(s): State<Arc<AppState>>,
    UrlPath((id, report_id)): UrlPath<(String, String)>,
) -> ApiResult<Json<serde_json::Value>> {
    s.store.load(&id)?;
    let path = report_path(&s.store, &id, &report_id).ok_or_else(|| not_found(format!("no report `{report_id}`")))?;
    Ok(Json(read_json(&path)?))
}
