//! Detector bridge: training and inference through an external detector
//! backend, and a memorizing reference detector for desk runs.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::dataset::{read_dataset, DatasetVariant};
use crate::model::{norm_to_pixel, pixel_to_norm, ImageGeometry, NormBox, PixelBox};
use crate::store::StoreError;
use crate::wire::{
    BackendError, BackendInfo, FrameDetections, FrameRef, InferRequest, InferResponse,
    TrainRequest, TrainResponse, WireDetection,
};

/// Frames per inference request.
pub const INFER_SHARD: usize = 64;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("invalid train spec: {0}")]
    Spec(String),
    #[error("dataset: {0}")]
    Dataset(#[from] StoreError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("detection ingestion: {0}")]
    Ingest(String),
}

pub trait DetectorBackend: Send + Sync {
    fn info(&self) -> Result<BackendInfo, BackendError>;
    fn train(&self, req: &TrainRequest) -> Result<TrainResponse, BackendError>;
    fn infer(&self, req: &InferRequest) -> Result<InferResponse, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSpec {
    pub epochs: u32,
    pub batch: u32,
    pub image_size: u32,
    pub confidence: f64,
    pub iou_threshold: f64,
    pub class_agnostic_nms: bool,
    /// Forwarded to the backend untouched.
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl Default for TrainSpec {
    fn default() -> Self {
        let mut extra = serde_json::Map::new();
        extra.insert("lr0".into(), serde_json::json!(0.01));
        extra.insert("optimizer".into(), serde_json::json!("SGD"));
        extra.insert("augment".into(), serde_json::json!(false));
        Self {
            epochs: 25,
            batch: 12,
            image_size: 640,
            confidence: 0.2,
            iou_threshold: 0.5,
            class_agnostic_nms: true,
            extra,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<(), DetectorError> {
        if self.epochs == 0 || self.batch == 0 || self.image_size == 0 {
            return Err(DetectorError::Spec("epochs, batch and image_size must be positive".into()));
        }
        for (name, v) in [("confidence", self.confidence), ("iou_threshold", self.iou_threshold)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(DetectorError::Spec(format!("{name} {v} outside (0, 1)")));
            }
        }
        Ok(())
    }

    pub fn request(&self, job_id: &str, dataset: &Path) -> TrainRequest {
        TrainRequest {
            job_id: job_id.to_string(),
            dataset: dataset.to_path_buf(),
            epochs: self.epochs,
            batch: self.batch,
            image_size: self.image_size,
            confidence: self.confidence,
            iou_threshold: self.iou_threshold,
            class_agnostic_nms: self.class_agnostic_nms,
            extra: self.extra.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame_index: u32,
    pub norm_box: NormBox,
    pub confidence: f64,
}

impl Detection {
    pub fn class_id(&self) -> u32 {
        self.norm_box.class_id
    }
}

pub type Detections = BTreeMap<u32, Vec<Detection>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub model_token: String,
    pub wall_seconds: f64,
}

/// Checks the dataset, then asks the backend to train on it.
pub fn train(
    job_id: &str,
    dataset: &Path,
    spec: &TrainSpec,
    class_names: Option<&[String]>,
    backend: &dyn DetectorBackend,
) -> Result<TrainOutcome, DetectorError> {
    spec.validate()?;
    let ds = read_dataset(dataset)?;
    if let Some(names) = class_names {
        if ds.manifest.class_names != names {
            return Err(DetectorError::Spec(format!(
                "dataset classes {:?} differ from project classes {:?}",
                ds.manifest.class_names, names
            )));
        }
    }
    let resp = backend.train(&spec.request(job_id, dataset))?;
    if resp.job_id != job_id {
        return Err(BackendError::Protocol(format!("reply for job `{}`", resp.job_id)).into());
    }
    Ok(TrainOutcome {
        model_token: resp.model_token,
        wall_seconds: resp.wall_seconds,
    })
}

/// Converts one frame of backend detections, dropping sub-threshold ones.
/// Returns the kept detections and the number dropped.
pub fn ingest_frame(
    frame: &FrameDetections,
    geometry: ImageGeometry,
    confidence_floor: f64,
) -> Result<(Vec<Detection>, usize), DetectorError> {
    let mut kept = Vec::with_capacity(frame.detections.len());
    let mut dropped = 0;
    for d in &frame.detections {
        if !(0.0..=1.0).contains(&d.confidence) {
            return Err(DetectorError::Ingest(format!(
                "frame {}: confidence {} outside [0,1]",
                frame.frame_index, d.confidence
            )));
        }
        if d.confidence < confidence_floor {
            dropped += 1;
            continue;
        }
        let pb = PixelBox::new(d.x_min, d.y_min, d.x_max, d.y_max).map_err(|e| {
            DetectorError::Ingest(format!("frame {}: {e}", frame.frame_index))
        })?;
        match pixel_to_norm(&pb, geometry, d.class_id) {
            Ok(norm_box) => kept.push(Detection {
                frame_index: frame.frame_index,
                norm_box,
                confidence: d.confidence,
            }),
            Err(_) => dropped += 1,
        }
    }
    Ok((kept, dropped))
}

/// Runs inference over `frames` in shards. Every requested frame gets an
/// entry, possibly empty.
pub fn infer(
    job_id: &str,
    model_token: &str,
    frames: &[FrameRef],
    geometry: ImageGeometry,
    confidence_floor: f64,
    backend: &dyn DetectorBackend,
) -> Result<Detections, DetectorError> {
    let shards: Vec<Vec<(u32, Vec<Detection>, usize)>> = frames
        .par_chunks(INFER_SHARD)
        .map(|shard| {
            let resp = backend.infer(&InferRequest {
                job_id: job_id.to_string(),
                model_token: model_token.to_string(),
                frames: shard.to_vec(),
                geometry,
            })?;
            if resp.job_id != job_id {
                return Err(BackendError::Protocol(format!("reply for job `{}`", resp.job_id)).into());
            }
            let by_frame: HashMap<u32, &FrameDetections> =
                resp.frames.iter().map(|f| (f.frame_index, f)).collect();
            shard
                .iter()
                .map(|f| {
                    let fd = by_frame.get(&f.index).ok_or_else(|| {
                        BackendError::Protocol(format!("no detections for frame {}", f.index))
                    })?;
                    let (kept, dropped) = ingest_frame(fd, geometry, confidence_floor)?;
                    Ok((f.index, kept, dropped))
                })
                .collect()
        })
        .collect::<Result<_, DetectorError>>()?;
    let mut out = Detections::new();
    let mut dropped = 0;
    for (frame, dets, d) in shards.into_iter().flatten() {
        dropped += d;
        out.insert(frame, dets);
    }
    if dropped > 0 {
        warn!(dropped, "detections below the confidence floor or degenerate were dropped");
    }
    Ok(out)
}

/// Memorizing detector. Training records the dataset's labels; inference
/// answers each frame with the labels of the nearest trained frame (the
/// earlier one on ties), confidence `decay^distance`.
///
/// Tokens name the dataset, so a new process can answer for a token issued
/// by an earlier one.
#[derive(Debug)]
pub struct ReferenceDetector {
    pub decay: f64,
    cache: Mutex<HashMap<String, Arc<BTreeMap<u32, Vec<NormBox>>>>>,
}

impl Default for ReferenceDetector {
    fn default() -> Self {
        Self {
            decay: 0.98,
            cache: Mutex::new(HashMap::new()),
        }
    }
}

impl ReferenceDetector {
    pub const TOKEN_PREFIX: &'static str = "ref:";

    fn load(&self, token: &str) -> Result<Arc<BTreeMap<u32, Vec<NormBox>>>, BackendError> {
        if let Some(m) = self.cache.lock().unwrap_or_else(|e| e.into_inner()).get(token) {
            return Ok(m.clone());
        }
        let path = token
            .strip_prefix(Self::TOKEN_PREFIX)
            .ok_or_else(|| BackendError::Rejected(format!("unknown model token `{token}`")))?;
        let ds = read_dataset(Path::new(path))
            .map_err(|e| BackendError::Rejected(format!("model token `{token}`: {e}")))?;
        let memory: BTreeMap<u32, Vec<NormBox>> = ds
            .labels
            .into_iter()
            .map(|l| {
                let boxes = match ds.manifest.variant {
                    DatasetVariant::Detect => l.boxes,
                    DatasetVariant::Segment => l
                        .polygons
                        .iter()
                        .filter_map(|p| {
                            let xs = p.vertices.iter().map(|v| v.0);
                            let ys = p.vertices.iter().map(|v| v.1);
                            NormBox::from_extent(
                                p.class_id,
                                xs.clone().fold(f64::INFINITY, f64::min),
                                ys.clone().fold(f64::INFINITY, f64::min),
                                xs.fold(f64::NEG_INFINITY, f64::max),
                                ys.fold(f64::NEG_INFINITY, f64::max),
                            )
                            .ok()
                        })
                        .collect(),
                };
                (l.frame_index, boxes)
            })
            .collect();
        let memory = Arc::new(memory);
        self.cache
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(token.to_string(), memory.clone());
        Ok(memory)
    }

    /// Nearest trained frame and its distance.
    pub fn nearest(seen: &BTreeMap<u32, Vec<NormBox>>, frame: u32) -> Option<(u32, u32)> {
        let before = seen.range(..=frame).next_back().map(|(&f, _)| f);
        let after = seen.range(frame..).next().map(|(&f, _)| f);
        match (before, after) {
            (Some(b), Some(a)) if a - frame < frame - b => Some((a, a - frame)),
            (Some(b), _) => Some((b, frame - b)),
            (None, Some(a)) => Some((a, a - frame)),
            (None, None) => None,
        }
    }
}

impl DetectorBackend for ReferenceDetector {
    fn info(&self) -> Result<BackendInfo, BackendError> {
        Ok(BackendInfo::named("reference-detector"))
    }

    fn train(&self, req: &TrainRequest) -> Result<TrainResponse, BackendError> {
        let started = std::time::Instant::now();
        let token = format!("{}{}", Self::TOKEN_PREFIX, req.dataset.display());
        self.cache
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .remove(&token);
        self.load(&token)?;
        Ok(TrainResponse {
            job_id: req.job_id.clone(),
            model_token: token,
            wall_seconds: started.elapsed().as_secs_f64(),
        })
    }

    fn infer(&self, req: &InferRequest) -> Result<InferResponse, BackendError> {
        let memory = self.load(&req.model_token)?;
        let frames = req
            .frames
            .iter()
            .map(|f| {
                let detections = match Self::nearest(&memory, f.index) {
                    Some((src, dist)) => {
                        let confidence = self.decay.powi(dist as i32);
                        memory[&src]
                            .iter()
                            .map(|b| {
                                let p = norm_to_pixel(b, req.geometry);
                                WireDetection {
                                    class_id: b.class_id,
                                    x_min: p.x_min,
                                    y_min: p.y_min,
                                    x_max: p.x_max,
                                    y_max: p.y_max,
                                    confidence,
                                }
                            })
                            .collect()
                    }
                    None => Vec::new(),
                };
                FrameDetections {
                    frame_index: f.index,
                    detections,
                }
            })
            .collect();
        Ok(InferResponse {
            job_id: req.job_id.clone(),
            frames,
        })
    }
}

/// Frame references for a whole video.
pub fn video_frames(count: u32, path_of: impl Fn(u32) -> PathBuf) -> Vec<FrameRef> {
    (0..count)
        .map(|index| FrameRef {
            index,
            path: path_of(index),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{emit_dataset, AblationTag, DatasetSpec};
    use crate::model::{FrameLabels, Provenance, SelectionMode};
    use crate::store::frame_stem;

    fn dataset(frames: &[u32]) -> (tempfile::TempDir, PathBuf, Vec<FrameLabels>) {
        let dir = tempfile::tempdir().unwrap();
        for &f in frames {
            std::fs::write(dir.path().join(format!("{}.png", frame_stem(f))), b"img").unwrap();
        }
        let labels: Vec<FrameLabels> = frames
            .iter()
            .map(|&f| FrameLabels {
                frame_index: f,
                boxes: vec![NormBox::new(0, 0.25 + 0.01 * f64::from(f), 0.5, 0.125, 0.25).unwrap()],
                polygons: Vec::new(),
                provenance: Provenance::Propagated,
            })
            .collect();
        let dest = dir.path().join("ds");
        let root = dir.path().to_path_buf();
        emit_dataset(
            &dest,
            &labels,
            &["object".into()],
            &move |i| root.join(format!("{}.png", frame_stem(i))),
            &DatasetSpec {
                variant: DatasetVariant::Detect,
                pairs: vec![0],
                train_fraction: 1.0,
                tag: AblationTag {
                    mode: SelectionMode::VariableBox,
                    sam: false,
                    filter: true,
                },
            },
        )
        .unwrap();
        (dir, dest, labels)
    }

    fn g() -> ImageGeometry {
        ImageGeometry::new(1280, 720).unwrap()
    }

    #[test]
    fn spec_defaults_and_checks() {
        let s = TrainSpec::default();
        assert_eq!((s.epochs, s.batch, s.image_size), (25, 12, 640));
        assert_eq!((s.confidence, s.iou_threshold, s.class_agnostic_nms), (0.2, 0.5, true));
        s.validate().unwrap();
        let zero = TrainSpec {
            epochs: 0,
            ..TrainSpec::default()
        };
        assert!(matches!(zero.validate(), Err(DetectorError::Spec(_))));
    }

    #[test]
    fn memorizes_and_decays() {
        let (_d, ds, labels) = dataset(&[0, 1, 2, 10]);
        let det = ReferenceDetector::default();
        let out = train("t", &ds, &TrainSpec::default(), Some(&["object".into()]), &det).unwrap();
        assert!(out.model_token.starts_with("ref:"));
        let frames = video_frames(14, |i| format!("{i}.png").into());
        let dets = infer("i", &out.model_token, &frames, g(), 0.2, &det).unwrap();
        assert_eq!(dets.len(), 14);
        let d0 = &dets[&0][0];
        assert_eq!(d0.confidence, 1.0);
        assert!((d0.norm_box.cx - labels[0].boxes[0].cx).abs() < 1e-12);
        // Frame 6 is 4 from frame 2 and 4 from frame 10: the earlier wins.
        let d6 = &dets[&6][0];
        assert!((d6.norm_box.cx - labels[2].boxes[0].cx).abs() < 1e-12);
        assert!((d6.confidence - 0.98f64.powi(4)).abs() < 1e-15);
        let d7 = &dets[&7][0];
        assert!((d7.norm_box.cx - labels[3].boxes[0].cx).abs() < 1e-12);
        // Pure given a token, and usable by a fresh detector.
        let again = infer("i", &out.model_token, &frames, g(), 0.2, &ReferenceDetector::default()).unwrap();
        assert_eq!(dets, again);
        assert!(infer("i", &out.model_token, &[], g(), 0.2, &det).unwrap().is_empty());
        assert!(infer("i", "nope", &frames, g(), 0.2, &det).is_err());
    }

    #[test]
    fn class_mismatch_is_rejected() {
        let (_d, ds, _) = dataset(&[0]);
        let det = ReferenceDetector::default();
        let err = train("t", &ds, &TrainSpec::default(), Some(&["car".into()]), &det).unwrap_err();
        assert!(matches!(err, DetectorError::Spec(_)));
    }

    #[test]
    fn ingestion_thresholds() {
        let fd = FrameDetections {
            frame_index: 3,
            detections: vec![
                WireDetection { class_id: 0, x_min: 10.0, y_min: 10.0, x_max: 50.0, y_max: 40.0, confidence: 0.9 },
                WireDetection { class_id: 0, x_min: 10.0, y_min: 10.0, x_max: 50.0, y_max: 40.0, confidence: 0.1 },
            ],
        };
        let (kept, dropped) = ingest_frame(&fd, g(), 0.2).unwrap();
        assert_eq!((kept.len(), dropped), (1, 1));
        let mut bad = fd.clone();
        bad.detections[0].confidence = 1.5;
        assert!(ingest_frame(&bad, g(), 0.2).is_err());
    }
}
