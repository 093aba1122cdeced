//! Project persistence and ground-truth ingestion.
//!
//! One directory per project:
//!
//! ```text
//! <root>/<project_id>/
//!   manifest            versioned JSON, see [`Project`]
//!   frames/             000000.png, 000001.png, ...
//!   labels/propagated/  per-run propagation and fitting output
//!   labels/inferred/    per-run detector output
//!   datasets/           emitted training datasets
//!   reports/            evaluation reports
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{self, FormatError};
use crate::model::{
    pixel_to_norm, AnnotationSequencePair, FrameLabels, ImageGeometry, ModelError, PixelBox,
    Provenance, SeedAnnotation,
};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest";
pub const FRAMES_DIR: &str = "frames";
pub const PROPAGATED_DIR: &str = "labels/propagated";
pub const INFERRED_DIR: &str = "labels/inferred";
pub const DATASETS_DIR: &str = "datasets";
pub const REPORTS_DIR: &str = "reports";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("project `{0}` already exists")]
    DuplicateProject(String),
    #[error("project `{0}` not found")]
    NotFound(String),
    #[error("project `{0}` is locked by another writer")]
    Locked(String),
    #[error("invalid project name `{0}`: use letters, digits, `-` and `_`")]
    InvalidName(String),
    #[error("{path}: malformed manifest: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: unsupported manifest version {found}")]
    Version { path: PathBuf, found: u32 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("{0}")]
    Invalid(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes through a sibling temp file and a rename, so readers never see a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let tmp = path.with_extension("tmp~");
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// `000042` for frame 42; lexicographic order equals numeric order.
pub fn frame_stem(index: u32) -> String {
    format!("{index:06}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Propagate,
    Segment,
    Emit,
    Train,
    Infer,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Propagate,
        Stage::Segment,
        Stage::Emit,
        Stage::Train,
        Stage::Infer,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Propagate => "propagate",
            Stage::Segment => "segment",
            Stage::Emit => "emit",
            Stage::Train => "train",
            Stage::Infer => "infer",
            Stage::Eval => "eval",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Pending,
    Running,
    Done,
    Failed,
}

/// One stage execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub stage: Stage,
    pub run_id: String,
    /// Snapshot of the full pipeline config that ran this stage.
    pub config: serde_json::Value,
    pub status: JobStatus,
    /// Wall seconds, present once the job is Done or Failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Set when the stage found committed output and did no work.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub resumed: bool,
}

impl JobRecord {
    pub fn validate(&self) -> Result<(), String> {
        let finished = matches!(self.status, JobStatus::Done | JobStatus::Failed);
        if self.wall_seconds.is_some() != finished {
            return Err(format!(
                "job {}: timings belong to finished jobs only",
                self.job_id
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Project {
    pub project_id: String,
    pub geometry: ImageGeometry,
    pub frame_count: u32,
    pub class_names: Vec<String>,
    #[serde(default)]
    pub pairs: Vec<AnnotationSequencePair>,
    #[serde(default)]
    pub job_history: Vec<JobRecord>,
}

#[derive(Serialize)]
struct ManifestOut<'a> {
    version: u32,
    #[serde(flatten)]
    project: &'a Project,
}

#[derive(Deserialize)]
struct ManifestIn {
    version: u32,
    #[serde(flatten)]
    project: Project,
}

impl Project {
    pub fn new(
        project_id: &str,
        geometry: ImageGeometry,
        frame_count: u32,
        class_names: Vec<String>,
    ) -> Result<Self, StoreError> {
        if !valid_name(project_id) {
            return Err(StoreError::InvalidName(project_id.to_string()));
        }
        if frame_count == 0 {
            return Err(StoreError::Invalid("frame_count must be >= 1".into()));
        }
        if class_names.is_empty() {
            return Err(StoreError::Invalid("at least one class name is required".into()));
        }
        Ok(Self {
            project_id: project_id.to_string(),
            geometry,
            frame_count,
            class_names,
            pairs: Vec::new(),
            job_history: Vec::new(),
        })
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.frame_count == 0 {
            return Err(StoreError::Invalid("frame_count must be >= 1".into()));
        }
        for (i, p) in self.pairs.iter().enumerate() {
            p.validate()?;
            self.check_pair(p).map_err(|m| StoreError::Invalid(format!("pair {i}: {m}")))?;
            for q in &self.pairs[i + 1..] {
                if p.overlaps(q) {
                    return Err(StoreError::Invalid(format!(
                        "pair {i} overlaps the pair seeded at frame {}",
                        q.first_frame()
                    )));
                }
            }
        }
        for j in &self.job_history {
            j.validate().map_err(StoreError::Invalid)?;
        }
        Ok(())
    }

    fn check_pair(&self, p: &AnnotationSequencePair) -> Result<(), String> {
        if p.last_frame() >= self.frame_count {
            return Err(format!(
                "frames {}..={} exceed the {} frames of the video",
                p.first_frame(),
                p.last_frame(),
                self.frame_count
            ));
        }
        let seeds = std::iter::once(&p.seed).chain(p.alternate.iter());
        for s in seeds {
            if let Some(e) = s
                .entries
                .iter()
                .find(|e| e.class_id as usize >= self.class_names.len())
            {
                return Err(format!(
                    "class {} out of range for {} classes",
                    e.class_id,
                    self.class_names.len()
                ));
            }
        }
        Ok(())
    }

    /// Adds a seed governing `frame_count` frames. A seed in the other
    /// selection mode for an existing pair's exact window becomes that pair's
    /// alternate.
    pub fn add_seed(&mut self, seed: SeedAnnotation, frame_count: u32) -> Result<usize, StoreError> {
        let pair = AnnotationSequencePair::new(seed, frame_count)?;
        self.check_pair(&pair).map_err(StoreError::Invalid)?;
        if let Some((i, existing)) = self
            .pairs
            .iter_mut()
            .enumerate()
            .find(|(_, p)| p.first_frame() == pair.first_frame() && p.frame_count == frame_count)
        {
            if existing.seed_for(pair.seed.mode).is_some() {
                return Err(StoreError::Invalid(format!(
                    "frame {} already has a {} seed",
                    pair.first_frame(),
                    pair.seed.mode
                )));
            }
            existing.alternate = Some(pair.seed);
            return Ok(i);
        }
        if let Some(q) = self.pairs.iter().find(|q| q.overlaps(&pair)) {
            return Err(StoreError::Invalid(format!(
                "frames {}..={} overlap the pair seeded at frame {}",
                pair.first_frame(),
                pair.last_frame(),
                q.first_frame()
            )));
        }
        let first = pair.first_frame();
        self.pairs.push(pair);
        self.pairs.sort_by_key(|p| p.first_frame());
        Ok(self
            .pairs
            .iter()
            .position(|p| p.first_frame() == first)
            .expect("pair just inserted"))
    }

    pub fn to_manifest(&self) -> String {
        serde_json::to_string_pretty(&ManifestOut {
            version: MANIFEST_VERSION,
            project: self,
        })
        .expect("project serializes")
    }

    pub fn from_manifest(text: &str, path: &Path) -> Result<Self, StoreError> {
        let version: serde_json::Value =
            serde_json::from_str(text).map_err(|source| StoreError::Manifest {
                path: path.to_path_buf(),
                source,
            })?;
        let found = version.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != MANIFEST_VERSION {
            return Err(StoreError::Version {
                path: path.to_path_buf(),
                found,
            });
        }
        let m: ManifestIn = serde_json::from_value(version).map_err(|source| StoreError::Manifest {
            path: path.to_path_buf(),
            source,
        })?;
        debug_assert_eq!(m.version, MANIFEST_VERSION);
        m.project.validate()?;
        Ok(m.project)
    }
}

fn valid_name(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 128
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// Held while writing to a project; removed on drop.
#[derive(Debug)]
pub struct ProjectLock {
    path: PathBuf,
}

impl Drop for ProjectLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Root directory holding many projects.
#[derive(Debug, Clone)]
pub struct ProjectStore {
    root: PathBuf,
}

impl ProjectStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn project_dir(&self, project_id: &str) -> PathBuf {
        self.root.join(project_id)
    }

    pub fn create_project(
        &self,
        name: &str,
        geometry: ImageGeometry,
        frame_count: u32,
        class_names: Vec<String>,
    ) -> Result<Project, StoreError> {
        let project = Project::new(name, geometry, frame_count, class_names)?;
        let dir = self.project_dir(name);
        match fs::create_dir(&dir) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(StoreError::DuplicateProject(name.to_string()))
            }
            Err(e) => return Err(io_err(&dir)(e)),
        }
        for sub in [FRAMES_DIR, PROPAGATED_DIR, INFERRED_DIR, DATASETS_DIR, REPORTS_DIR] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        self.save(&project)?;
        Ok(project)
    }

    pub fn list(&self) -> Result<Vec<String>, StoreError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(io_err(&self.root))? {
            let entry = entry.map_err(io_err(&self.root))?;
            if entry.path().join(MANIFEST_FILE).is_file() {
                ids.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn load(&self, project_id: &str) -> Result<Project, StoreError> {
        if !valid_name(project_id) {
            return Err(StoreError::InvalidName(project_id.to_string()));
        }
        let path = self.project_dir(project_id).join(MANIFEST_FILE);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound(project_id.to_string()))
            }
            Err(e) => return Err(io_err(&path)(e)),
        };
        Project::from_manifest(&text, &path)
    }

    pub fn save(&self, project: &Project) -> Result<(), StoreError> {
        project.validate()?;
        let path = self.project_dir(&project.project_id).join(MANIFEST_FILE);
        write_atomic(&path, project.to_manifest().as_bytes())
    }

    /// Advisory single-writer lock.
    pub fn lock(&self, project_id: &str) -> Result<ProjectLock, StoreError> {
        let dir = self.project_dir(project_id);
        if !dir.join(MANIFEST_FILE).is_file() {
            return Err(StoreError::NotFound(project_id.to_string()));
        }
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(ProjectLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(StoreError::Locked(project_id.to_string()))
            }
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    pub fn put_frame(
        &self,
        project: &Project,
        index: u32,
        extension: &str,
        bytes: &[u8],
    ) -> Result<PathBuf, StoreError> {
        if index >= project.frame_count {
            return Err(StoreError::Invalid(format!(
                "frame {index} beyond the {} frames of the video",
                project.frame_count
            )));
        }
        if extension.is_empty() || !extension.chars().all(|c| c.is_ascii_alphanumeric()) {
            return Err(StoreError::Invalid(format!("bad image extension `{extension}`")));
        }
        if let Some(old) = self.frame_path(&project.project_id, index) {
            fs::remove_file(&old).map_err(io_err(&old))?;
        }
        let path = self
            .project_dir(&project.project_id)
            .join(FRAMES_DIR)
            .join(format!("{}.{}", frame_stem(index), extension.to_ascii_lowercase()));
        write_atomic(&path, bytes)?;
        Ok(path)
    }

    /// Stored image for a frame, whatever its extension.
    pub fn frame_path(&self, project_id: &str, index: u32) -> Option<PathBuf> {
        let dir = self.project_dir(project_id).join(FRAMES_DIR);
        let stem = frame_stem(index);
        fs::read_dir(dir).ok()?.flatten().map(|e| e.path()).find(|p| {
            p.file_stem().and_then(|s| s.to_str()) == Some(stem.as_str())
                && p.extension().is_some()
                && p.extension() != Some("tmp~".as_ref())
        })
    }

    /// Every stored frame image by index.
    pub fn frame_paths(&self, project_id: &str) -> Result<BTreeMap<u32, PathBuf>, StoreError> {
        let dir = self.project_dir(project_id).join(FRAMES_DIR);
        let mut out = BTreeMap::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let p = entry.map_err(io_err(&dir))?.path();
            if p.extension().is_none() || p.extension() == Some("tmp~".as_ref()) {
                continue;
            }
            if let Some(i) = p.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()) {
                out.insert(i, p);
            }
        }
        Ok(out)
    }

    /// Path a backend should read for a frame. Points at the expected PNG
    /// location when nothing has been uploaded yet.
    pub fn frame_reference(&self, project_id: &str, index: u32) -> PathBuf {
        self.frame_path(project_id, index).unwrap_or_else(|| {
            self.project_dir(project_id)
                .join(FRAMES_DIR)
                .join(format!("{}.png", frame_stem(index)))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruthFormat {
    /// Directory of `NNNNNN.txt` YOLO label files.
    YoloTxtDir,
    /// MOT-style CSV with 1-based frames and pixel boxes.
    MotCsv,
}

impl std::str::FromStr for GroundTruthFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "yolo" | "yolo_txt_dir" => Ok(GroundTruthFormat::YoloTxtDir),
            "mot" | "mot_csv" => Ok(GroundTruthFormat::MotCsv),
            other => Err(format!("unknown ground truth format `{other}` (expected yolo|mot)")),
        }
    }
}

pub type GroundTruth = BTreeMap<u32, FrameLabels>;

/// Loads benchmark labels, normalizing everything to [`crate::model::NormBox`].
/// MOT rows carry no class mapping and land in class 0.
pub fn load_ground_truth(
    path: &Path,
    format: GroundTruthFormat,
    geometry: ImageGeometry,
    num_classes: Option<usize>,
) -> Result<GroundTruth, StoreError> {
    match format {
        GroundTruthFormat::YoloTxtDir => load_yolo_dir(path, num_classes),
        GroundTruthFormat::MotCsv => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            mot_to_ground_truth(&text, geometry).map_err(|source| StoreError::Format {
                path: path.to_path_buf(),
                source,
            })
        }
    }
}

fn load_yolo_dir(dir: &Path, num_classes: Option<usize>) -> Result<GroundTruth, StoreError> {
    let mut out = GroundTruth::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension() != Some("txt".as_ref()) {
            continue;
        }
        let Some(index) = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<u32>().ok())
        else {
            tracing::debug!(path = %path.display(), "skipping non-frame label file");
            continue;
        };
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let boxes = format::parse_box_file(&text, num_classes).map_err(|source| {
            StoreError::Format {
                path: path.clone(),
                source,
            }
        })?;
        out.insert(
            index,
            FrameLabels {
                frame_index: index,
                boxes,
                polygons: Vec::new(),
                provenance: Provenance::Manual,
            },
        );
    }
    Ok(out)
}

pub fn mot_to_ground_truth(text: &str, geometry: ImageGeometry) -> Result<GroundTruth, FormatError> {
    let mut out = GroundTruth::new();
    for row in format::parse_mot_csv(text)? {
        let pb = PixelBox {
            x_min: row.x,
            y_min: row.y,
            x_max: row.x + row.w,
            y_max: row.y + row.h,
        };
        let b = pixel_to_norm(&pb, geometry, 0).map_err(|e| FormatError::Malformed {
            line: row.line,
            message: e.to_string(),
        })?;
        let index = row.frame_index();
        out.entry(index)
            .or_insert_with(|| FrameLabels::empty(index, Provenance::Manual))
            .boxes
            .push(b);
    }
    Ok(out)
}
