//! Box resizing: propagated boxes prompt a segmenter, and each returned mask
//! is reduced to a fitted box and a polygon.

pub mod contour;
mod rle;

pub use contour::{components, extract_contour, min_bounding_box, simplify_ring, trace_from};
pub use rle::{decode_rle, encode_rle};

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::model::{
    norm_to_pixel, pixel_to_norm, FrameLabels, ImageGeometry, MaskGrid, NormBox, PixelBox,
    PolygonLabel, TrackSet,
};
use crate::scene::SyntheticScene;
use crate::wire::{BackendError, BackendInfo, FrameRef, PromptBox, SegmentRequest, SegmentResponse, WireMask};

/// Max deviation, in pixels, allowed when simplifying polygon rings.
pub const SIMPLIFY_TOLERANCE_PX: f64 = 1.5;

#[derive(Debug, Error)]
pub enum SegfitError {
    #[error("invalid segfit config: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

pub trait SegmenterBackend: Send + Sync {
    fn info(&self) -> Result<BackendInfo, BackendError>;
    fn segment(&self, req: &SegmentRequest) -> Result<SegmentResponse, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegfitConfig {
    pub batch_size: usize,
    pub min_mask_pixels: usize,
    pub enabled: bool,
    /// Frames segmented in parallel; `None` uses the global pool.
    #[serde(default)]
    pub workers: Option<usize>,
}

impl Default for SegfitConfig {
    fn default() -> Self {
        Self {
            batch_size: 50,
            min_mask_pixels: 4,
            enabled: true,
            workers: None,
        }
    }
}

impl SegfitConfig {
    pub fn validate(&self) -> Result<(), SegfitError> {
        if self.batch_size == 0 {
            return Err(SegfitError::Config("batch_size must be >= 1".into()));
        }
        if self.workers == Some(0) {
            return Err(SegfitError::Config("workers must be >= 1".into()));
        }
        Ok(())
    }
}

/// One prompt: a track's box in a frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub track_id: u32,
    pub class_id: u32,
    pub pixel_box: PixelBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterPrompt {
    pub frame: FrameRef,
    pub prompts: Vec<Prompt>,
}

/// Fitted labels plus counts of the events worth reporting.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SegfitOutput {
    pub labels: Vec<FrameLabels>,
    /// Instances whose mask was too small and kept their prompt box.
    pub fallbacks: usize,
    /// Instances whose mask had more than one blob.
    pub fragmented: usize,
    pub backend_calls: usize,
}

/// A fitted instance: the box and polygon derived from one mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Fitted {
    pub norm_box: NormBox,
    pub polygon: PolygonLabel,
    pub fallback: bool,
    pub fragmented: bool,
}

fn corners_polygon(b: &NormBox) -> PolygonLabel {
    let c = b.unit_corners();
    PolygonLabel {
        class_id: b.class_id,
        vertices: vec![
            (c.x_min, c.y_min),
            (c.x_max, c.y_min),
            (c.x_max, c.y_max),
            (c.x_min, c.y_max),
        ],
    }
}

fn ring_polygon(class_id: u32, ring: &[(u32, u32)], g: ImageGeometry) -> Option<PolygonLabel> {
    let vertices = ring
        .iter()
        .map(|&(x, y)| ((f64::from(x) + 0.5) / g.width(), (f64::from(y) + 0.5) / g.height()))
        .collect();
    PolygonLabel::new(class_id, vertices).ok()
}

/// Reduces one mask to a fitted box and polygon; small masks fall back to
/// `prompt`.
pub fn fit_mask(mask: &MaskGrid, prompt: &NormBox, min_mask_pixels: usize) -> Fitted {
    let g = mask.geometry();
    let fallback = || Fitted {
        norm_box: *prompt,
        polygon: corners_polygon(prompt),
        fallback: true,
        fragmented: false,
    };
    if mask.count() < min_mask_pixels.max(1) {
        return fallback();
    }
    let comps = components(mask);
    let start = *comps[0].iter().min_by_key(|&&(x, y)| (y, x)).expect("non-empty component");
    let ring = trace_from(mask, start);
    let pb = min_bounding_box(ring.iter().copied()).expect("non-empty ring");
    let Ok(norm_box) = pixel_to_norm(&pb, g, prompt.class_id) else {
        return fallback();
    };
    let polygon = ring_polygon(prompt.class_id, &simplify_ring(&ring, SIMPLIFY_TOLERANCE_PX), g)
        .or_else(|| ring_polygon(prompt.class_id, &ring, g))
        .unwrap_or_else(|| corners_polygon(&norm_box));
    Fitted {
        norm_box,
        polygon,
        fallback: false,
        fragmented: comps.len() > 1,
    }
}

/// Segments every prompt of one frame in batches and fits the masks, in
/// prompt order. Returns the fitted instances and the number of calls.
pub fn segment_frame(
    job_id: &str,
    frame: &FrameRef,
    geometry: ImageGeometry,
    prompts: &[(u32, NormBox)],
    backend: &dyn SegmenterBackend,
    batch: usize,
    min_mask_pixels: usize,
) -> Result<(Vec<Fitted>, usize), SegfitError> {
    let mut out = Vec::with_capacity(prompts.len());
    let mut calls = 0;
    for chunk in prompts.chunks(batch.max(1)) {
        let req = SegmentRequest {
            job_id: job_id.to_string(),
            frame: frame.clone(),
            geometry,
            boxes: chunk
                .iter()
                .map(|(track_id, b)| {
                    let p = norm_to_pixel(b, geometry);
                    PromptBox {
                        track_id: *track_id,
                        x_min: p.x_min,
                        y_min: p.y_min,
                        x_max: p.x_max,
                        y_max: p.y_max,
                    }
                })
                .collect(),
        };
        let resp = backend.segment(&req)?;
        calls += 1;
        if resp.job_id != job_id {
            return Err(BackendError::Protocol(format!("reply for job `{}`", resp.job_id)).into());
        }
        for (track_id, b) in chunk {
            let wm = resp
                .masks
                .iter()
                .find(|m| m.track_id == *track_id)
                .ok_or_else(|| BackendError::Protocol(format!("no mask for track {track_id}")))?;
            if (wm.cols, wm.rows) != (geometry.width_px(), geometry.height_px()) {
                return Err(BackendError::Protocol(format!(
                    "mask {}x{} does not match frame {}x{}",
                    wm.cols,
                    wm.rows,
                    geometry.width_px(),
                    geometry.height_px()
                ))
                .into());
            }
            let mask = decode_rle(&wm.rle, wm.rows, wm.cols).map_err(BackendError::Protocol)?;
            let fitted = fit_mask(&mask, b, min_mask_pixels);
            if fitted.fallback {
                warn!(frame = frame.index, track_id, "mask below min_mask_pixels, keeping prompt box");
            }
            if fitted.fragmented {
                debug!(frame = frame.index, track_id, "mask fragments dropped");
            }
            out.push(fitted);
        }
    }
    Ok((out, calls))
}

/// Resizes every alive box of a track set. Disabled, the propagated boxes
/// pass through bit-for-bit and no polygons are produced.
pub fn segment_and_fit(
    job_id: &str,
    tracks: &TrackSet,
    frame_ref: &(dyn Fn(u32) -> FrameRef + Sync),
    backend: Option<&dyn SegmenterBackend>,
    cfg: &SegfitConfig,
) -> Result<SegfitOutput, SegfitError> {
    cfg.validate()?;
    if !cfg.enabled {
        return Ok(SegfitOutput {
            labels: tracks.to_frame_labels(),
            ..SegfitOutput::default()
        });
    }
    let backend =
        backend.ok_or_else(|| SegfitError::Config("segmentation enabled without a backend".into()))?;
    let info = backend.info()?;
    let batch = cfg.batch_size.min(info.max_prompts.unwrap_or(usize::MAX)).max(1);
    let g = tracks.geometry;
    let frames: Vec<_> = tracks.all_frames().collect();

    let run = || {
        frames
            .par_iter()
            .map(|&(frame_index, points, provenance)| {
                let prompts: Vec<(u32, NormBox)> = points
                    .iter()
                    .filter(|p| p.is_alive())
                    .filter_map(|p| Some((p.track_id, p.to_norm_box()?)))
                    .collect();
                let (fitted, calls) = if prompts.is_empty() {
                    (Vec::new(), 0)
                } else {
                    segment_frame(
                        job_id,
                        &frame_ref(frame_index),
                        g,
                        &prompts,
                        backend,
                        batch,
                        cfg.min_mask_pixels,
                    )?
                };
                Ok((frame_index, provenance, fitted, calls))
            })
            .collect::<Result<Vec<_>, SegfitError>>()
    };
    let results = match cfg.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| SegfitError::Config(e.to_string()))?
            .install(run)?,
        None => run()?,
    };

    let mut out = SegfitOutput::default();
    for (frame_index, provenance, fitted, calls) in results {
        out.backend_calls += calls;
        out.fallbacks += fitted.iter().filter(|f| f.fallback).count();
        out.fragmented += fitted.iter().filter(|f| f.fragmented).count();
        out.labels.push(FrameLabels {
            frame_index,
            boxes: fitted.iter().map(|f| f.norm_box).collect(),
            polygons: fitted.into_iter().map(|f| f.polygon).collect(),
            provenance,
        });
    }
    Ok(out)
}

/// Deterministic segmenter answering from a synthetic scene.
///
/// Each prompt selects the target covering most of the prompt box; the mask
/// is that target's shape restricted to the prompt box grown by `dilation`
/// pixels (negative values shrink it).
#[derive(Debug, Clone)]
pub struct OracleSegmenter {
    scene: Arc<SyntheticScene>,
    pub dilation: f64,
    pub max_prompts: Option<usize>,
}

impl OracleSegmenter {
    pub fn new(scene: Arc<SyntheticScene>) -> Self {
        Self {
            scene,
            dilation: 32.0,
            max_prompts: None,
        }
    }

    pub fn mask_for(&self, frame: u32, prompt: &PixelBox) -> MaskGrid {
        let g = self.scene.geometry;
        let best = self
            .scene
            .targets
            .iter()
            .map(|t| (t, t.pixels(frame, g, Some(prompt)).count()))
            .filter(|&(_, n)| n > 0)
            .fold(None, |acc: Option<(&_, usize)>, c| match acc {
                Some(a) if a.1 >= c.1 => Some(a),
                _ => Some(c),
            });
        match best {
            Some((t, _)) => {
                let window = prompt.inflate(self.dilation).clip_to(g);
                self.scene.rasterize(t, frame, Some(&window))
            }
            None => MaskGrid::new(g),
        }
    }
}

impl SegmenterBackend for OracleSegmenter {
    fn info(&self) -> Result<BackendInfo, BackendError> {
        Ok(BackendInfo {
            max_prompts: self.max_prompts,
            ..BackendInfo::named("oracle-segmenter")
        })
    }

    fn segment(&self, req: &SegmentRequest) -> Result<SegmentResponse, BackendError> {
        if req.geometry != self.scene.geometry {
            return Err(BackendError::Rejected("frame geometry differs from the scene".into()));
        }
        if self.max_prompts.is_some_and(|m| req.boxes.len() > m) {
            return Err(BackendError::Rejected(format!(
                "{} prompts exceed max_prompts",
                req.boxes.len()
            )));
        }
        let g = self.scene.geometry;
        let masks = req
            .boxes
            .iter()
            .map(|b| {
                let pb = PixelBox {
                    x_min: b.x_min,
                    y_min: b.y_min,
                    x_max: b.x_max,
                    y_max: b.y_max,
                };
                WireMask {
                    track_id: b.track_id,
                    rle: encode_rle(&self.mask_for(req.frame.index, &pb)),
                    rows: g.height_px(),
                    cols: g.width_px(),
                }
            })
            .collect();
        Ok(SegmentResponse {
            job_id: req.job_id.clone(),
            masks,
        })
    }
}
