//! Point propagation: drives a tracker backend over a pair's frame window in
//! overlapping chunks, terminates tracks that reach the border band, and
//! materializes a [`TrackSet`].

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ImageGeometry, SeedAnnotation, TrackFrame, TrackPoint, TrackSet, TrackStatus};
use crate::scene::SyntheticScene;
use crate::wire::{
    BackendError, BackendInfo, FrameRef, TrackRequest, TrackResponse, TrackedPoint, WirePoint,
};

pub const DEFAULT_CHUNK_LENGTH: usize = 8;

/// Slack for points sitting exactly on the band edge, so `0.95 + 2 * 0.02`
/// counts as reaching 0.99.
const BAND_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PropagationError {
    #[error("invalid propagation request: {0}")]
    Invalid(String),
    #[error("seed frame {0} is missing from the window")]
    SeedFrameMissing(u32),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

pub trait TrackerBackend: Send + Sync {
    fn info(&self) -> Result<BackendInfo, BackendError>;
    fn track(&self, req: &TrackRequest) -> Result<TrackResponse, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub edge_margin: f64,
    pub enabled: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            edge_margin: 0.01,
            enabled: true,
        }
    }
}

impl FilterConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PropagationError> {
        if !(0.0..0.5).contains(&self.edge_margin) {
            return Err(PropagationError::Invalid(format!(
                "edge_margin {} outside [0, 0.5)",
                self.edge_margin
            )));
        }
        Ok(())
    }

    /// Whether a center lies in the border band.
    pub fn in_band(&self, cx: f64, cy: f64) -> bool {
        let lo = self.edge_margin + BAND_EPS;
        let hi = 1.0 - self.edge_margin - BAND_EPS;
        cx <= lo || cx >= hi || cy <= lo || cy >= hi
    }
}

/// Splits points into those kept and those terminated at the border band.
/// Terminated points come back marked [`TrackStatus::TerminatedEdge`].
pub fn positional_filter(
    points: &[TrackPoint],
    filter: &FilterConfig,
) -> (Vec<TrackPoint>, Vec<TrackPoint>) {
    if !filter.enabled {
        return (points.to_vec(), Vec::new());
    }
    let (terminated, kept): (Vec<_>, Vec<_>) =
        points.iter().partition(|p| filter.in_band(p.cx, p.cy));
    let terminated = terminated
        .into_iter()
        .map(|p| TrackPoint {
            status: TrackStatus::TerminatedEdge,
            ..p
        })
        .collect();
    (kept, terminated)
}

/// A whole-window tracking job for one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerRequest {
    pub job_id: String,
    /// Window frames in order; the first is the seed frame.
    pub frames: Vec<FrameRef>,
    pub seed: SeedAnnotation,
    pub geometry: ImageGeometry,
    pub chunk_length: usize,
}

impl TrackerRequest {
    pub fn validate(&self) -> Result<(), PropagationError> {
        if self.chunk_length < 2 {
            return Err(PropagationError::Invalid("chunk_length must be >= 2".into()));
        }
        self.seed
            .validate()
            .map_err(|e| PropagationError::Invalid(e.to_string()))?;
        match self.frames.first() {
            Some(f) if f.index == self.seed.frame_index => {}
            _ => return Err(PropagationError::SeedFrameMissing(self.seed.frame_index)),
        }
        for (k, f) in self.frames.iter().enumerate() {
            if f.index != self.seed.frame_index + k as u32 {
                return Err(PropagationError::Invalid(format!(
                    "window frame {} out of sequence",
                    f.index
                )));
            }
        }
        Ok(())
    }
}

fn protocol(msg: String) -> PropagationError {
    PropagationError::Backend(BackendError::Protocol(msg))
}

/// Positions reported for one batch, by track id, one map per chunk frame.
fn track_batch(
    backend: &dyn TrackerBackend,
    req: &TrackRequest,
) -> Result<Vec<HashMap<u32, (f64, f64)>>, PropagationError> {
    let resp = backend.track(req)?;
    if resp.job_id != req.job_id {
        return Err(protocol(format!(
            "reply for job `{}` while waiting on `{}`",
            resp.job_id, req.job_id
        )));
    }
    if resp.frames.len() != req.frames.len() {
        return Err(protocol(format!(
            "{} frames returned for a {}-frame chunk",
            resp.frames.len(),
            req.frames.len()
        )));
    }
    resp.frames
        .iter()
        .map(|pts| {
            let mut m = HashMap::with_capacity(pts.len());
            for p in pts {
                if !(p.x.is_finite() && p.y.is_finite()) {
                    return Err(protocol(format!("non-finite position for track {}", p.track_id)));
                }
                m.insert(p.track_id, (p.x, p.y));
            }
            for q in &req.points {
                if !m.contains_key(&q.track_id) {
                    return Err(protocol(format!("track {} missing from reply", q.track_id)));
                }
            }
            Ok(m)
        })
        .collect()
}

/// Propagates one pair's seed through its window. Any backend failure fails
/// the whole pair; no partial track set is returned.
pub fn propagate_pair(
    req: &TrackerRequest,
    backend: &dyn TrackerBackend,
    filter: &FilterConfig,
) -> Result<TrackSet, PropagationError> {
    req.validate()?;
    filter.validate()?;
    let info = backend.info()?;
    let chunk = req
        .chunk_length
        .min(info.max_chunk.unwrap_or(usize::MAX))
        .max(2);
    let max_points = info.max_points.unwrap_or(usize::MAX).max(1);

    let seed = req.seed.initial_points();
    let mut current = seed.clone();
    let mut frames = Vec::with_capacity(req.frames.len().saturating_sub(1));
    let mut start = 0;
    while start + 1 < req.frames.len() {
        let end = (start + chunk - 1).min(req.frames.len() - 1);
        let window = &req.frames[start..=end];
        let mut reported: Vec<HashMap<u32, (f64, f64)>> = vec![HashMap::new(); window.len()];
        for batch in current.chunks(max_points) {
            let treq = TrackRequest {
                job_id: req.job_id.clone(),
                frames: window.to_vec(),
                points: batch
                    .iter()
                    .map(|p| WirePoint {
                        track_id: p.track_id,
                        x: p.cx,
                        y: p.cy,
                    })
                    .collect(),
                geometry: req.geometry,
            };
            for (acc, got) in reported.iter_mut().zip(track_batch(backend, &treq)?) {
                acc.extend(got);
            }
        }
        for (k, positions) in reported.iter().enumerate().skip(1) {
            let moved: Vec<TrackPoint> = current
                .iter()
                .map(|p| {
                    let (cx, cy) = positions[&p.track_id];
                    TrackPoint { cx, cy, ..*p }
                })
                .collect();
            let (kept, terminated) = positional_filter(&moved, filter);
            let mut points: Vec<TrackPoint> = kept.iter().chain(&terminated).copied().collect();
            points.sort_by_key(|p| p.track_id);
            frames.push(TrackFrame {
                frame_index: window[k].index,
                points,
            });
            current = kept;
        }
        start = end;
    }

    let set = TrackSet {
        seed_frame: req.seed.frame_index,
        geometry: req.geometry,
        seed,
        frames,
    };
    debug_assert!(set.validate().is_ok());
    Ok(set)
}

/// Propagates several pairs concurrently. Results keep request order.
pub fn propagate_all(
    reqs: &[TrackerRequest],
    backend: &dyn TrackerBackend,
    filter: &FilterConfig,
) -> Result<Vec<TrackSet>, PropagationError> {
    reqs.par_iter()
        .map(|r| propagate_pair(r, backend, filter))
        .collect()
}

/// Deterministic in-process tracker answering from a synthetic scene.
///
/// Seeds bind to the target whose reported position in the chunk's first
/// frame is nearest. With `border_sticking`, targets that left the image
/// keep reporting their clamped last position, the way point trackers do.
#[derive(Debug, Clone)]
pub struct OracleTracker {
    scene: Arc<SyntheticScene>,
    pub border_sticking: bool,
    /// Half-width of the uniform noise added to reported positions,
    /// normalized.
    pub noise: f64,
    pub noise_seed: u64,
    /// Largest normalized distance at which a seed binds to a target.
    pub binding_radius: f64,
    pub max_points: Option<usize>,
    pub max_chunk: Option<usize>,
}

impl OracleTracker {
    pub fn new(scene: Arc<SyntheticScene>) -> Self {
        Self {
            scene,
            border_sticking: true,
            noise: 0.0,
            noise_seed: 0,
            binding_radius: 0.05,
            max_points: None,
            max_chunk: None,
        }
    }

    pub fn scene(&self) -> &SyntheticScene {
        &self.scene
    }

    /// Reported normalized position of a target at a frame, before noise.
    pub fn position(&self, target: usize, frame: u32) -> (f64, f64) {
        let g = self.scene.geometry;
        let (x, y) = self.scene.targets[target].center_at(frame);
        let (nx, ny) = (x / g.width(), y / g.height());
        if self.border_sticking {
            (nx.clamp(0.0, 1.0), ny.clamp(0.0, 1.0))
        } else {
            (nx, ny)
        }
    }

    fn jitter(&self, frame: u32, track_id: u32) -> (f64, f64) {
        if self.noise <= 0.0 {
            return (0.0, 0.0);
        }
        let key = self.noise_seed ^ (u64::from(frame) << 32) ^ u64::from(track_id);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        (
            rng.random_range(-self.noise..=self.noise),
            rng.random_range(-self.noise..=self.noise),
        )
    }

    fn bind(&self, frame: u32, x: f64, y: f64) -> Option<usize> {
        (0..self.scene.targets.len())
            .map(|i| {
                let (tx, ty) = self.position(i, frame);
                (i, (tx - x).hypot(ty - y))
            })
            .filter(|&(_, d)| d <= self.binding_radius)
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
    }
}

impl TrackerBackend for OracleTracker {
    fn info(&self) -> Result<BackendInfo, BackendError> {
        Ok(BackendInfo {
            max_points: self.max_points,
            max_chunk: self.max_chunk,
            ..BackendInfo::named("oracle-tracker")
        })
    }

    fn track(&self, req: &TrackRequest) -> Result<TrackResponse, BackendError> {
        let Some(first) = req.frames.first() else {
            return Err(BackendError::Rejected("empty frame list".into()));
        };
        if self.max_points.is_some_and(|m| req.points.len() > m) {
            return Err(BackendError::Rejected(format!(
                "{} points exceed max_points",
                req.points.len()
            )));
        }
        if self.max_chunk.is_some_and(|m| req.frames.len() > m) {
            return Err(BackendError::Rejected(format!(
                "{} frames exceed max_chunk",
                req.frames.len()
            )));
        }
        let bound: Vec<usize> = req
            .points
            .iter()
            .map(|p| {
                self.bind(first.index, p.x, p.y).ok_or_else(|| {
                    BackendError::Rejected(format!(
                        "point {} at ({}, {}) is farther than {} from every trajectory",
                        p.track_id, p.x, p.y, self.binding_radius
                    ))
                })
            })
            .collect::<Result<_, _>>()?;
        let frames = req
            .frames
            .iter()
            .enumerate()
            .map(|(k, f)| {
                req.points
                    .iter()
                    .zip(&bound)
                    .map(|(p, &t)| {
                        let (x, y) = if k == 0 {
                            (p.x, p.y)
                        } else {
                            let (x, y) = self.position(t, f.index);
                            let (dx, dy) = self.jitter(f.index, p.track_id);
                            (x + dx, y + dy)
                        };
                        TrackedPoint {
                            track_id: p.track_id,
                            x,
                            y,
                            visible: (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y),
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(TrackResponse {
            job_id: req.job_id.clone(),
            frames,
        })
    }
}

/// Frame references for a window, with paths from `path_of`.
pub fn window_refs(
    first: u32,
    len: u32,
    path_of: impl Fn(u32) -> std::path::PathBuf,
) -> Vec<FrameRef> {
    (first..first + len)
        .map(|index| FrameRef {
            index,
            path: path_of(index),
        })
        .collect()
}
