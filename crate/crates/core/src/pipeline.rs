//! Stage chaining: propagate, segment, emit, train, infer, eval.
//!
//! A run is identified by a hash of its config. Every stage writes its
//! output under a run directory and commits it with a rename; a stage whose
//! output is already committed is skipped, so re-running a config resumes
//! after the last committed stage.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::info;

use crate::dataset::{emit_dataset, AblationTag, DatasetSpec, DatasetVariant};
use crate::detector::{self, Detection, Detections, DetectorBackend, ReferenceDetector, TrainOutcome, TrainSpec};
use crate::eval::{evaluate, reports_csv, throughput_from_jobs, AnnotationRatio, EvalReport, MatchConfig, ThroughputReport};
use crate::format::{format_detection_line, parse_detection_file};
use crate::model::{FrameLabels, SelectionMode, TrackSet};
use crate::propagation::{self, FilterConfig, OracleTracker, TrackerBackend, TrackerRequest};
use crate::scene::SyntheticScene;
use crate::segfit::{self, OracleSegmenter, SegfitConfig, SegmenterBackend};
use crate::store::{
    frame_stem, io_err, load_ground_truth, write_atomic, GroundTruthFormat, JobRecord, JobStatus,
    Project, ProjectStore, Stage, StoreError, DATASETS_DIR, FRAMES_DIR, INFERRED_DIR,
    PROPAGATED_DIR, REPORTS_DIR,
};
use crate::wire::{FrameRef, ProcessBackend};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("precondition: {0}")]
    Precondition(String),
    #[error("{stage} stage failed: {message}")]
    Stage { stage: Stage, message: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("backend setup: {0}")]
    Backend(String),
}

/// How to reach a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// In-process oracle answering from a synthetic scene file.
    Oracle {
        scene: PathBuf,
        #[serde(default)]
        options: OracleOptions,
    },
    /// In-process memorizing detector.
    Reference,
    /// External process speaking the wire protocol on stdio.
    Process {
        command: Vec<String>,
        #[serde(default = "default_timeout")]
        timeout_seconds: f64,
    },
}

fn default_timeout() -> f64 {
    600.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleOptions {
    pub border_sticking: bool,
    pub noise: f64,
    pub noise_seed: u64,
    pub dilation: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            border_sticking: true,
            noise: 0.0,
            noise_seed: 0,
            dilation: 32.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendsConfig {
    pub tracker: BackendSpec,
    pub segmenter: BackendSpec,
    pub detector: BackendSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSource {
    pub path: PathBuf,
    pub format: GroundTruthFormat,
}

/// One versioned config per run; its hash names the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub version: u32,
    pub mode: SelectionMode,
    /// Pair indices to use; all pairs when absent.
    #[serde(default)]
    pub pairs: Option<Vec<usize>>,
    pub chunk_length: usize,
    pub filter: FilterConfig,
    pub segfit: SegfitConfig,
    pub variant: DatasetVariant,
    pub train_fraction: f64,
    pub train: TrainSpec,
    pub matching: MatchConfig,
    #[serde(default)]
    pub ground_truth: Option<GroundTruthSource>,
    /// Seconds spent seeding by hand, for the throughput report.
    #[serde(default)]
    pub manual_seconds: Option<f64>,
    pub backends: BackendsConfig,
}

impl PipelineConfig {
    pub fn new(backends: BackendsConfig) -> Self {
        Self {
            version: CONFIG_VERSION,
            mode: SelectionMode::VariableBox,
            pairs: None,
            chunk_length: propagation::DEFAULT_CHUNK_LENGTH,
            filter: FilterConfig::default(),
            segfit: SegfitConfig::default(),
            variant: DatasetVariant::Detect,
            train_fraction: 1.0,
            train: TrainSpec::default(),
            matching: MatchConfig::default(),
            ground_truth: None,
            manual_seconds: None,
            backends,
        }
    }

    /// Config backed entirely by in-process oracles over a scene file.
    pub fn oracle(scene: &Path) -> Self {
        let oracle = BackendSpec::Oracle {
            scene: scene.to_path_buf(),
            options: OracleOptions::default(),
        };
        Self::new(BackendsConfig {
            tracker: oracle.clone(),
            segmenter: oracle,
            detector: BackendSpec::Reference,
        })
    }

    pub fn tag(&self) -> AblationTag {
        AblationTag {
            mode: self.mode,
            sam: self.segfit.enabled,
            filter: self.filter.enabled,
        }
    }

    pub fn with_tag(&self, tag: AblationTag) -> Self {
        let mut c = self.clone();
        c.mode = tag.mode;
        c.segfit.enabled = tag.sam;
        c.filter.enabled = tag.filter;
        c
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Precondition(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("config version {} (expected {CONFIG_VERSION})", self.version));
        }
        if self.chunk_length < 2 {
            return bad("chunk_length must be >= 2".into());
        }
        self.filter.validate().map_err(|e| PipelineError::Precondition(e.to_string()))?;
        self.segfit.validate().map_err(|e| PipelineError::Precondition(e.to_string()))?;
        self.train.validate().map_err(|e| PipelineError::Precondition(e.to_string()))?;
        self.matching.validate().map_err(|e| PipelineError::Precondition(e.to_string()))?;
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad(format!("train_fraction {} outside (0, 1]", self.train_fraction));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let v: serde_json::Value =
            serde_json::from_str(text).map_err(|e| PipelineError::Precondition(format!("config: {e}")))?;
        let found = v.get("version").and_then(|v| v.as_u64());
        if found != Some(u64::from(CONFIG_VERSION)) {
            return Err(PipelineError::Precondition(format!(
                "config version {found:?} (expected {CONFIG_VERSION})"
            )));
        }
        serde_json::from_value(v).map_err(|e| PipelineError::Precondition(format!("config: {e}")))
    }

    /// Short content hash naming the run.
    pub fn run_id(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..6])
    }
}

/// Live backend handles for a run.
pub struct Backends {
    pub tracker: Arc<dyn TrackerBackend>,
    pub segmenter: Arc<dyn SegmenterBackend>,
    pub detector: Arc<dyn DetectorBackend>,
}

impl Backends {
    /// Builds backends from config. Oracle specs naming the same scene file
    /// share one loaded scene; identical process commands share one child.
    pub fn from_config(cfg: &BackendsConfig) -> Result<Self, PipelineError> {
        let mut scenes: BTreeMap<PathBuf, Arc<SyntheticScene>> = BTreeMap::new();
        let mut procs: BTreeMap<Vec<String>, Arc<ProcessBackend>> = BTreeMap::new();
        let mut scene = |p: &Path| -> Result<Arc<SyntheticScene>, PipelineError> {
            if let Some(s) = scenes.get(p) {
                return Ok(s.clone());
            }
            let text = fs::read_to_string(p)
                .map_err(|e| PipelineError::Backend(format!("{}: {e}", p.display())))?;
            let s: SyntheticScene = serde_json::from_str(&text)
                .map_err(|e| PipelineError::Backend(format!("{}: {e}", p.display())))?;
            let s = Arc::new(s);
            scenes.insert(p.to_path_buf(), s.clone());
            Ok(s)
        };
        let mut process = |command: &[String], timeout: f64| -> Result<Arc<ProcessBackend>, PipelineError> {
            if let Some(p) = procs.get(command) {
                return Ok(p.clone());
            }
            let p = Arc::new(
                ProcessBackend::spawn(command, Duration::from_secs_f64(timeout))
                    .map_err(|e| PipelineError::Backend(e.to_string()))?,
            );
            procs.insert(command.to_vec(), p.clone());
            Ok(p)
        };
        let tracker: Arc<dyn TrackerBackend> = match &cfg.tracker {
            BackendSpec::Oracle { scene: p, options } => {
                let mut t = OracleTracker::new(scene(p)?);
                t.border_sticking = options.border_sticking;
                t.noise = options.noise;
                t.noise_seed = options.noise_seed;
                Arc::new(t)
            }
            BackendSpec::Process { command, timeout_seconds } => process(command, *timeout_seconds)?,
            BackendSpec::Reference => {
                return Err(PipelineError::Backend("the reference backend only detects".into()))
            }
        };
        let segmenter: Arc<dyn SegmenterBackend> = match &cfg.segmenter {
            BackendSpec::Oracle { scene: p, options } => {
                let mut s = OracleSegmenter::new(scene(p)?);
                s.dilation = options.dilation;
                Arc::new(s)
            }
            BackendSpec::Process { command, timeout_seconds } => process(command, *timeout_seconds)?,
            BackendSpec::Reference => {
                return Err(PipelineError::Backend("the reference backend only detects".into()))
            }
        };
        let detector: Arc<dyn DetectorBackend> = match &cfg.detector {
            BackendSpec::Reference => Arc::new(ReferenceDetector::default()),
            BackendSpec::Process { command, timeout_seconds } => process(command, *timeout_seconds)?,
            BackendSpec::Oracle { .. } => {
                return Err(PipelineError::Backend("oracle backends do not detect; use `reference`".into()))
            }
        };
        Ok(Self {
            tracker,
            segmenter,
            detector,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub run_id: String,
    pub tag: AblationTag,
    pub method: String,
    pub report: EvalReport,
    pub throughput: ThroughputReport,
    pub annotation_ratio: AnnotationRatio,
    pub ratio_display: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub run_id: String,
    pub jobs: Vec<JobRecord>,
    pub summary: Option<EvalSummary>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Last stage to run; the whole chain when absent.
    pub stop_after: Option<Stage>,
}

/// Paths of one run inside a project.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub run_id: String,
    pub tracks: PathBuf,
    pub fitted: PathBuf,
    pub dataset: PathBuf,
    pub train: PathBuf,
    pub inferred: PathBuf,
    pub eval_json: PathBuf,
    pub eval_csv: PathBuf,
    pub config: PathBuf,
    pub jobs: PathBuf,
}

impl RunPaths {
    pub fn new(project_dir: &Path, run_id: &str) -> Self {
        let prop = project_dir.join(PROPAGATED_DIR).join(run_id);
        let reports = project_dir.join(REPORTS_DIR).join(run_id);
        Self {
            run_id: run_id.to_string(),
            tracks: prop.join("tracks"),
            fitted: prop.join("fitted"),
            dataset: project_dir.join(DATASETS_DIR).join(run_id),
            train: reports.join("train.json"),
            inferred: project_dir.join(INFERRED_DIR).join(run_id),
            eval_json: reports.join("eval.json"),
            eval_csv: reports.join("eval.csv"),
            config: reports.join("config.json"),
            jobs: reports.join("jobs"),
        }
    }

    /// The committed output marking a stage done.
    pub fn output(&self, stage: Stage) -> &Path {
        match stage {
            Stage::Propagate => &self.tracks,
            Stage::Segment => &self.fitted,
            Stage::Emit => &self.dataset,
            Stage::Train => &self.train,
            Stage::Infer => &self.inferred,
            Stage::Eval => &self.eval_json,
        }
    }
}

fn tmp_dir(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    dir.with_file_name(name)
}

/// Fills a fresh temporary directory and renames it into place.
fn commit_dir(dir: &Path, fill: impl FnOnce(&Path) -> Result<(), PipelineError>) -> Result<(), PipelineError> {
    let tmp = tmp_dir(dir);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    fill(&tmp)?;
    fs::rename(&tmp, dir).map_err(io_err(dir))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    write_atomic(path, serde_json::to_string_pretty(value).expect("serializes").as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| StoreError::Manifest {
        path: path.to_path_buf(),
        source,
    })
}

/// Everything a stage needs.
struct Ctx<'a> {
    store: &'a ProjectStore,
    project: Project,
    config: &'a PipelineConfig,
    backends: &'a Backends,
    paths: RunPaths,
    frames: BTreeMap<u32, PathBuf>,
    pairs: Vec<usize>,
}

impl Ctx<'_> {
    fn frame_ref(&self, index: u32) -> FrameRef {
        FrameRef {
            index,
            path: self.frames.get(&index).cloned().unwrap_or_else(|| {
                self.store
                    .project_dir(&self.project.project_id)
                    .join(FRAMES_DIR)
                    .join(format!("{}.png", frame_stem(index)))
            }),
        }
    }

    fn job_id(&self, stage: Stage) -> String {
        format!("{}-{}", self.paths.run_id, stage.name())
    }

    fn propagate(&self) -> Result<(), String> {
        let mut reqs = Vec::new();
        for &k in &self.pairs {
            let pair = &self.project.pairs[k];
            let seed = pair.seed_for(self.config.mode).ok_or_else(|| {
                format!(
                    "pair {k} (frame {}) has no {} seed",
                    pair.first_frame(),
                    self.config.mode.label()
                )
            })?;
            let missing: Vec<u32> = pair.frame_range().filter(|f| !self.frames.contains_key(f)).collect();
            if !missing.is_empty() {
                return Err(format!("pair {k}: frames without images: {missing:?}"));
            }
            reqs.push(TrackerRequest {
                job_id: format!("{}-{k}", self.job_id(Stage::Propagate)),
                frames: pair.frame_range().map(|i| self.frame_ref(i)).collect(),
                seed: seed.clone(),
                geometry: self.project.geometry,
                chunk_length: self.config.chunk_length,
            });
        }
        let sets = propagation::propagate_all(&reqs, self.backends.tracker.as_ref(), &self.config.filter)
            .map_err(|e| e.to_string())?;
        commit_dir(&self.paths.tracks, |tmp| {
            fs::create_dir_all(tmp).map_err(io_err(tmp))?;
            for (k, set) in self.pairs.iter().zip(&sets) {
                write_json(&tmp.join(format!("pair_{k}.json")), set)?;
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
    }

    fn load_tracks(&self) -> Result<Vec<TrackSet>, String> {
        self.pairs
            .iter()
            .map(|k| read_json(&self.paths.tracks.join(format!("pair_{k}.json"))).map_err(|e| e.to_string()))
            .collect()
    }

    fn segment(&self) -> Result<(), String> {
        let sets = self.load_tracks()?;
        let mut summary = serde_json::Map::new();
        let mut labels: Vec<FrameLabels> = Vec::new();
        let segmenter = self.config.segfit.enabled.then(|| self.backends.segmenter.as_ref());
        let frame_ref = |i: u32| self.frame_ref(i);
        for (k, set) in self.pairs.iter().zip(&sets) {
            let job = format!("{}-{k}", self.job_id(Stage::Segment));
            let out = segfit::segment_and_fit(&job, set, &frame_ref, segmenter, &self.config.segfit)
                .map_err(|e| e.to_string())?;
            summary.insert(
                format!("pair_{k}"),
                serde_json::json!({
                    "fallbacks": out.fallbacks,
                    "fragmented": out.fragmented,
                    "backend_calls": out.backend_calls,
                }),
            );
            labels.extend(out.labels);
        }
        commit_dir(&self.paths.fitted, |tmp| {
            fs::create_dir_all(tmp).map_err(io_err(tmp))?;
            for l in &labels {
                write_json(&tmp.join(format!("{}.json", frame_stem(l.frame_index))), l)?;
            }
            write_json(&tmp.join("summary.json"), &summary)?;
            Ok(())
        })
        .map_err(|e| e.to_string())
    }

    fn load_fitted(&self) -> Result<Vec<FrameLabels>, String> {
        let mut out = Vec::new();
        for &k in &self.pairs {
            for f in self.project.pairs[k].frame_range() {
                let p = self.paths.fitted.join(format!("{}.json", frame_stem(f)));
                out.push(read_json(&p).map_err(|e| format!("missing labels for frame {f}: {e}"))?);
            }
        }
        Ok(out)
    }

    fn emit(&self) -> Result<(), String> {
        let labels = self.load_fitted()?;
        let spec = DatasetSpec {
            variant: self.config.variant,
            pairs: self.pairs.clone(),
            train_fraction: self.config.train_fraction,
            tag: self.config.tag(),
        };
        let image_of = |i: u32| self.frame_ref(i).path;
        commit_dir(&self.paths.dataset, |tmp| {
            emit_dataset(tmp, &labels, &self.project.class_names, &image_of, &spec)?;
            Ok(())
        })
        .map_err(|e| e.to_string())
    }

    fn train(&self) -> Result<f64, String> {
        let out = detector::train(
            &self.job_id(Stage::Train),
            &self.paths.dataset,
            &self.config.train,
            Some(&self.project.class_names),
            self.backends.detector.as_ref(),
        )
        .map_err(|e| e.to_string())?;
        write_json(&self.paths.train, &out).map_err(|e| e.to_string())?;
        Ok(out.wall_seconds)
    }

    fn infer(&self) -> Result<(), String> {
        let trained: TrainOutcome = read_json(&self.paths.train).map_err(|e| e.to_string())?;
        let frames: Vec<FrameRef> = (0..self.project.frame_count).map(|i| self.frame_ref(i)).collect();
        let dets = detector::infer(
            &self.job_id(Stage::Infer),
            &trained.model_token,
            &frames,
            self.project.geometry,
            self.config.train.confidence,
            self.backends.detector.as_ref(),
        )
        .map_err(|e| e.to_string())?;
        commit_dir(&self.paths.inferred, |tmp| {
            fs::create_dir_all(tmp).map_err(io_err(tmp))?;
            for (f, ds) in &dets {
                let text: String = ds
                    .iter()
                    .map(|d| format_detection_line(&d.norm_box, d.confidence) + "\n")
                    .collect();
                let p = tmp.join(format!("{}.txt", frame_stem(*f)));
                fs::write(&p, text).map_err(io_err(&p))?;
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
    }

    fn eval(&self, jobs: &[JobRecord]) -> Result<EvalSummary, String> {
        let src = self
            .config
            .ground_truth
            .as_ref()
            .ok_or("no ground truth configured")?;
        let gt = load_ground_truth(&src.path, src.format, self.project.geometry, Some(self.project.class_names.len()))
            .map_err(|e| e.to_string())?;
        let dets = load_detections(&self.paths.inferred, Some(self.project.class_names.len()))
            .map_err(|e| e.to_string())?;
        let report = evaluate(&gt, &dets, &self.config.matching).map_err(|e| e.to_string())?;
        let annotation_ratio = AnnotationRatio {
            seed_frames: self.pairs.len() as u64,
            inferred_frames: dets.len() as u64,
        };
        let tag = self.config.tag();
        let summary = EvalSummary {
            run_id: self.paths.run_id.clone(),
            tag,
            method: tag.label(),
            throughput: throughput_from_jobs(jobs, self.config.manual_seconds, u64::from(self.project.frame_count)),
            ratio_display: annotation_ratio.display(),
            annotation_ratio,
            report,
        };
        write_atomic(
            &self.paths.eval_csv,
            reports_csv(&[(summary.method.clone(), summary.report.clone())]).as_bytes(),
        )
        .map_err(|e| e.to_string())?;
        write_json(&self.paths.eval_json, &summary).map_err(|e| e.to_string())?;
        Ok(summary)
    }
}

/// Reads a directory of `NNNNNN.txt` detection files.
pub fn load_detections(dir: &Path, num_classes: Option<usize>) -> Result<Detections, StoreError> {
    let mut out = Detections::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let p = entry.map_err(io_err(dir))?.path();
        let Some(frame) = p
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<u32>().ok())
            .filter(|_| p.extension() == Some("txt".as_ref()))
        else {
            continue;
        };
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        let dets = parse_detection_file(&text, num_classes)
            .map_err(|source| StoreError::Format { path: p.clone(), source })?
            .into_iter()
            .map(|(norm_box, confidence)| Detection {
                frame_index: frame,
                norm_box,
                confidence,
            })
            .collect();
        out.insert(frame, dets);
    }
    Ok(out)
}

fn record_path(paths: &RunPaths, stage: Stage) -> PathBuf {
    paths.jobs.join(format!("{}.json", stage.name()))
}

/// Runs the chain for `config`, resuming after committed stages. Holds the
/// project lock for the whole run and appends job records to the project.
pub fn run_pipeline(
    store: &ProjectStore,
    project_id: &str,
    config: &PipelineConfig,
    backends: &Backends,
    opts: RunOptions,
) -> Result<RunOutcome, PipelineError> {
    config.validate()?;
    let _lock = store.lock(project_id)?;
    let project = store.load(project_id)?;
    if project.pairs.is_empty() {
        return Err(PipelineError::Precondition(format!("project `{project_id}` has no seeded pairs")));
    }
    let pairs = match &config.pairs {
        Some(p) => {
            if let Some(bad) = p.iter().find(|&&k| k >= project.pairs.len()) {
                return Err(PipelineError::Precondition(format!("no pair {bad}")));
            }
            p.clone()
        }
        None => (0..project.pairs.len()).collect(),
    };
    if pairs.is_empty() {
        return Err(PipelineError::Precondition("no pairs selected".into()));
    }
    if opts.stop_after.is_none_or(|s| s == Stage::Eval) && config.ground_truth.is_none() {
        return Err(PipelineError::Precondition("evaluation needs a ground_truth source".into()));
    }
    let run_id = config.run_id();
    let paths = RunPaths::new(&store.project_dir(project_id), &run_id);
    write_json(&paths.config, config)?;
    let ctx = Ctx {
        store,
        frames: store.frame_paths(project_id)?,
        project,
        config,
        backends,
        paths,
        pairs,
    };

    let mut jobs: Vec<JobRecord> = Vec::new();
    let mut summary = None;
    let snapshot = serde_json::to_value(config).expect("config serializes");
    for stage in Stage::ALL {
        let committed = ctx.paths.output(stage).exists();
        let record = if committed {
            let mut r: JobRecord = read_json(&record_path(&ctx.paths, stage)).unwrap_or_else(|_| JobRecord {
                job_id: ctx.job_id(stage),
                stage,
                run_id: run_id.clone(),
                config: snapshot.clone(),
                status: JobStatus::Done,
                wall_seconds: None,
                error: None,
                resumed: true,
            });
            r.resumed = true;
            if stage == Stage::Eval {
                summary = Some(read_json(&ctx.paths.eval_json)?);
            }
            info!(stage = stage.name(), run = %run_id, "already committed, skipping");
            r
        } else {
            info!(stage = stage.name(), run = %run_id, "running");
            let started = Instant::now();
            let result = match stage {
                Stage::Propagate => ctx.propagate(),
                Stage::Segment => ctx.segment(),
                Stage::Emit => ctx.emit(),
                Stage::Train => ctx.train().map(|_| ()),
                Stage::Infer => ctx.infer(),
                Stage::Eval => ctx.eval(&jobs).map(|s| summary = Some(s)),
            };
            let wall = started.elapsed().as_secs_f64();
            let mut r = JobRecord {
                job_id: ctx.job_id(stage),
                stage,
                run_id: run_id.clone(),
                config: snapshot.clone(),
                status: JobStatus::Done,
                wall_seconds: Some(wall),
                error: None,
                resumed: false,
            };
            if let Err(message) = result {
                r.status = JobStatus::Failed;
                r.error = Some(message.clone());
                append_history(store, project_id, &jobs, Some(&r))?;
                return Err(PipelineError::Stage { stage, message });
            }
            write_json(&record_path(&ctx.paths, stage), &r)?;
            r
        };
        jobs.push(record);
        if opts.stop_after == Some(stage) {
            break;
        }
    }
    append_history(store, project_id, &jobs, None)?;
    Ok(RunOutcome {
        run_id,
        jobs,
        summary,
    })
}

fn append_history(
    store: &ProjectStore,
    project_id: &str,
    jobs: &[JobRecord],
    failed: Option<&JobRecord>,
) -> Result<(), StoreError> {
    let mut project = store.load(project_id)?;
    project.job_history.extend(jobs.iter().cloned());
    project.job_history.extend(failed.cloned());
    store.save(&project)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tag: AblationTag,
    pub method: String,
    pub run_id: String,
    pub report: EvalReport,
}

/// Runs the eight ablation configurations in report row order.
pub fn ablation_sweep(
    store: &ProjectStore,
    project_id: &str,
    base: &PipelineConfig,
    backends: &Backends,
) -> Result<Vec<SweepRow>, PipelineError> {
    let project = store.load(project_id)?;
    let pairs: Vec<usize> = base.pairs.clone().unwrap_or_else(|| (0..project.pairs.len()).collect());
    for &k in &pairs {
        let pair = project
            .pairs
            .get(k)
            .ok_or_else(|| PipelineError::Precondition(format!("no pair {k}")))?;
        for mode in [SelectionMode::FixedBox, SelectionMode::VariableBox] {
            if pair.seed_for(mode).is_none() {
                return Err(PipelineError::Precondition(format!(
                    "pair {k} (frame {}) has no {} seed",
                    pair.first_frame(),
                    mode.label()
                )));
            }
        }
    }
    let mut rows = Vec::with_capacity(8);
    for tag in AblationTag::all() {
        let cfg = base.with_tag(tag);
        let out = run_pipeline(store, project_id, &cfg, backends, RunOptions::default())?;
        let s = out.summary.ok_or_else(|| PipelineError::Precondition("run ended without a report".into()))?;
        rows.push(SweepRow {
            tag,
            method: tag.label(),
            run_id: out.run_id,
            report: s.report,
        });
    }
    let dir = store
        .project_dir(project_id)
        .join(REPORTS_DIR)
        .join(format!("sweep-{}", base.run_id()));
    let table: Vec<(String, EvalReport)> = rows.iter().map(|r| (r.method.clone(), r.report.clone())).collect();
    write_atomic(&dir.join("table.csv"), reports_csv(&table).as_bytes())?;
    write_json(&dir.join("table.json"), &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ImageGeometry;
    use crate::scene::SceneParams;

    fn small_project(dir: &Path) -> (ProjectStore, PipelineConfig) {
        let params = SceneParams {
            geometry: ImageGeometry::new(640, 360).unwrap(),
            frame_count: 20,
            drifting: 4,
            exiting: 1,
            min_size_px: 24.0,
            max_size_px: 40.0,
            ..SceneParams::default()
        };
        let scene = SyntheticScene::generate(&params).unwrap();
        let store = ProjectStore::open(dir.join("projects")).unwrap();
        let mut project = store
            .create_project("p", scene.geometry, scene.frame_count, vec!["object".into()])
            .unwrap();
        scene.write_frames(&store.project_dir("p").join(FRAMES_DIR)).unwrap();
        for mode in [SelectionMode::VariableBox, SelectionMode::FixedBox] {
            project.add_seed(scene.seed_annotation(0, mode).unwrap(), 10).unwrap();
        }
        store.save(&project).unwrap();
        let scene_path = dir.join("scene.json");
        fs::write(&scene_path, serde_json::to_string(&scene).unwrap()).unwrap();
        let gt_path = dir.join("gt.csv");
        fs::write(&gt_path, scene.to_mot_csv()).unwrap();
        let mut cfg = PipelineConfig::oracle(&scene_path);
        cfg.ground_truth = Some(GroundTruthSource {
            path: gt_path,
            format: GroundTruthFormat::MotCsv,
        });
        (store, cfg)
    }

    #[test]
    fn config_round_trip_and_hash() {
        let cfg = PipelineConfig::oracle(Path::new("scene.json"));
        let back = PipelineConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.run_id(), cfg.run_id());
        assert_ne!(cfg.with_tag(AblationTag::all()[0]).run_id(), cfg.run_id());
        let bumped = cfg.to_json().replacen("\"version\": 1", "\"version\": 9", 1);
        assert!(PipelineConfig::from_json(&bumped).is_err());
    }

    #[test]
    fn full_chain_then_resume() {
        let dir = tempfile::tempdir().unwrap();
        let (store, cfg) = small_project(dir.path());
        let backends = Backends::from_config(&cfg.backends).unwrap();
        let out = run_pipeline(&store, "p", &cfg, &backends, RunOptions::default()).unwrap();
        assert_eq!(out.jobs.len(), 6);
        assert!(out.jobs.iter().all(|j| j.status == JobStatus::Done && !j.resumed));
        let s = out.summary.unwrap();
        assert!(s.report.recall > 0.9, "{:?}", s.report);
        assert_eq!(s.annotation_ratio.inferred_frames, 20);

        let again = run_pipeline(&store, "p", &cfg, &backends, RunOptions::default()).unwrap();
        assert!(again.jobs.iter().all(|j| j.resumed));
        assert_eq!(again.summary.unwrap().report, s.report);
        assert_eq!(store.load("p").unwrap().job_history.len(), 12);
    }

    #[test]
    fn crash_mid_chain_resumes_at_first_uncommitted_stage() {
        let dir = tempfile::tempdir().unwrap();
        let (store, cfg) = small_project(dir.path());
        let backends = Backends::from_config(&cfg.backends).unwrap();
        let out = run_pipeline(&store, "p", &cfg, &backends, RunOptions { stop_after: Some(Stage::Emit) }).unwrap();
        assert_eq!(out.jobs.len(), 3);
        let paths = RunPaths::new(&store.project_dir("p"), &out.run_id);
        // A half-written inference directory is never taken as committed.
        fs::create_dir_all(tmp_dir(&paths.inferred)).unwrap();
        let out = run_pipeline(&store, "p", &cfg, &backends, RunOptions::default()).unwrap();
        let resumed: Vec<bool> = out.jobs.iter().map(|j| j.resumed).collect();
        assert_eq!(resumed, vec![true, true, true, false, false, false]);
        assert!(!tmp_dir(&paths.inferred).exists());
    }

    #[test]
    fn segfit_off_passes_through_and_tags_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let (store, mut cfg) = small_project(dir.path());
        cfg.segfit.enabled = false;
        let backends = Backends::from_config(&cfg.backends).unwrap();
        let out = run_pipeline(&store, "p", &cfg, &backends, RunOptions { stop_after: Some(Stage::Emit) }).unwrap();
        let ds = crate::dataset::read_dataset(&RunPaths::new(&store.project_dir("p"), &out.run_id).dataset).unwrap();
        assert!(!ds.manifest.tag.sam);
        assert_eq!(ds.manifest.frames.len(), 10);
    }

    #[test]
    fn preconditions() {
        let dir = tempfile::tempdir().unwrap();
        let (store, cfg) = small_project(dir.path());
        let backends = Backends::from_config(&cfg.backends).unwrap();
        store
            .create_project("empty", ImageGeometry::DEFAULT, 10, vec!["a".into()])
            .unwrap();
        assert!(matches!(
            run_pipeline(&store, "empty", &cfg, &backends, RunOptions::default()),
            Err(PipelineError::Precondition(_))
        ));
        let mut no_gt = cfg.clone();
        no_gt.ground_truth = None;
        assert!(run_pipeline(&store, "p", &no_gt, &backends, RunOptions::default()).is_err());
        // Missing frames fail the propagate stage and are recorded.
        fs::remove_file(store.project_dir("p").join(FRAMES_DIR).join("000003.png")).unwrap();
        let err = run_pipeline(&store, "p", &cfg, &backends, RunOptions::default()).unwrap_err();
        assert!(matches!(err, PipelineError::Stage { stage: Stage::Propagate, .. }), "{err}");
        let hist = store.load("p").unwrap().job_history;
        assert_eq!(hist.last().unwrap().status, JobStatus::Failed);
    }
}
