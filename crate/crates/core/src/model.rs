//! Shared domain types and coordinate conventions.
//!
//! Normalized center-size boxes ([`NormBox`], YOLO semantics) are the
//! canonical store. Pixel corner boxes ([`PixelBox`]) only exist while doing
//! geometry. Pixel coordinates stay real-valued until file emission.

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance applied when checking that a normalized box lies inside the image.
pub const EXTENT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("image geometry must be at least 1x1, got {width}x{height}")]
    EmptyGeometry { width: u32, height: u32 },
    #[error("normalized box out of range: {0}")]
    BoxOutOfRange(String),
    #[error("pixel box has min corner beyond max corner: {0:?}")]
    InvertedBox(PixelBox),
    #[error("degenerate box with zero area: {0:?}")]
    DegenerateBox(PixelBox),
    #[error("invalid seed annotation: {0}")]
    InvalidSeed(String),
    #[error("invalid sequence pair: {0}")]
    InvalidPair(String),
    #[error("invalid polygon: {0}")]
    InvalidPolygon(String),
    #[error("invalid track set: {0}")]
    InvalidTrackSet(String),
}

/// Pixel dimensions of every frame in a video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawGeometry")]
pub struct ImageGeometry {
    width_px: u32,
    height_px: u32,
}

#[derive(Deserialize)]
struct RawGeometry {
    width_px: u32,
    height_px: u32,
}

impl TryFrom<RawGeometry> for ImageGeometry {
    type Error = ModelError;

    fn try_from(raw: RawGeometry) -> Result<Self, Self::Error> {
        ImageGeometry::new(raw.width_px, raw.height_px)
    }
}

impl ImageGeometry {
    /// 1280x720, the default working resolution.
    pub const DEFAULT: ImageGeometry = ImageGeometry {
        width_px: 1280,
        height_px: 720,
    };

    pub fn new(width_px: u32, height_px: u32) -> Result<Self, ModelError> {
        if width_px == 0 || height_px == 0 {
            return Err(ModelError::EmptyGeometry {
                width: width_px,
                height: height_px,
            });
        }
        Ok(Self {
            width_px,
            height_px,
        })
    }

    pub fn width_px(&self) -> u32 {
        self.width_px
    }

    pub fn height_px(&self) -> u32 {
        self.height_px
    }

    pub fn width(&self) -> f64 {
        f64::from(self.width_px)
    }

    pub fn height(&self) -> f64 {
        f64::from(self.height_px)
    }

    pub fn pixel_count(&self) -> usize {
        self.width_px as usize * self.height_px as usize
    }

    pub fn full_box(&self) -> PixelBox {
        PixelBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: self.width(),
            y_max: self.height(),
        }
    }
}

impl Default for ImageGeometry {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// A box in normalized center-size form: every field is a fraction of the
/// image width or height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub class_id: u32,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

fn snap_unit(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

impl NormBox {
    /// Validates ranges and image containment, absorbing float noise up to
    /// [`EXTENT_EPS`].
    pub fn new(class_id: u32, cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, ModelError> {
        let b = NormBox {
            class_id,
            cx,
            cy,
            w,
            h,
        };
        b.validate()?;
        Ok(NormBox {
            class_id,
            cx: snap_unit(cx),
            cy: snap_unit(cy),
            w: snap_unit(w),
            h: snap_unit(h),
        })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let NormBox { cx, cy, w, h, .. } = *self;
        let in_unit = |v: f64| v.is_finite() && (-EXTENT_EPS..=1.0 + EXTENT_EPS).contains(&v);
        if !in_unit(cx) || !in_unit(cy) {
            return Err(ModelError::BoxOutOfRange(format!(
                "center ({cx}, {cy}) outside [0,1]"
            )));
        }
        if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0)
            || w > 1.0 + EXTENT_EPS
            || h > 1.0 + EXTENT_EPS
        {
            return Err(ModelError::BoxOutOfRange(format!(
                "size ({w}, {h}) outside (0,1]"
            )));
        }
        if cx - w / 2.0 < -EXTENT_EPS
            || cx + w / 2.0 > 1.0 + EXTENT_EPS
            || cy - h / 2.0 < -EXTENT_EPS
            || cy + h / 2.0 > 1.0 + EXTENT_EPS
        {
            return Err(ModelError::BoxOutOfRange(format!(
                "extent of ({cx}, {cy}, {w}, {h}) leaves the image"
            )));
        }
        Ok(())
    }

    /// Builds a box from normalized corners, clipping them to the unit square.
    pub fn from_extent(
        class_id: u32,
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
    ) -> Result<Self, ModelError> {
        let (x0, x1) = (snap_unit(x0), snap_unit(x1));
        let (y0, y1) = (snap_unit(y0), snap_unit(y1));
        if !(x1 - x0 > 0.0 && y1 - y0 > 0.0) {
            return Err(ModelError::DegenerateBox(PixelBox {
                x_min: x0,
                y_min: y0,
                x_max: x1.max(x0),
                y_max: y1.max(y0),
            }));
        }
        Ok(NormBox {
            class_id,
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }

    /// Clips a possibly out-of-image center-size box to the image. Returns
    /// `None` when nothing of it remains visible.
    pub fn clipped(class_id: u32, cx: f64, cy: f64, w: f64, h: f64) -> Option<Self> {
        let inside = cx - w / 2.0 >= 0.0
            && cx + w / 2.0 <= 1.0
            && cy - h / 2.0 >= 0.0
            && cy + h / 2.0 <= 1.0
            && w > 0.0
            && h > 0.0;
        if inside {
            return Some(NormBox {
                class_id,
                cx,
                cy,
                w,
                h,
            });
        }
        Self::from_extent(
            class_id,
            cx - w / 2.0,
            cy - h / 2.0,
            cx + w / 2.0,
            cy + h / 2.0,
        )
        .ok()
    }

    /// Corner form in unit coordinates. IoU is invariant under per-axis
    /// scaling, so matching can run here without a geometry.
    pub fn unit_corners(&self) -> PixelBox {
        PixelBox {
            x_min: self.cx - self.w / 2.0,
            y_min: self.cy - self.h / 2.0,
            x_max: self.cx + self.w / 2.0,
            y_max: self.cy + self.h / 2.0,
        }
    }
}

/// Pixel-space corner box. `x_max`/`y_max` are exclusive edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl PixelBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, ModelError> {
        let b = PixelBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if !(x_min.is_finite() && y_min.is_finite() && x_max.is_finite() && y_max.is_finite())
            || x_min > x_max
            || y_min > y_max
        {
            return Err(ModelError::InvertedBox(b));
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.width() > 0.0 && self.height() > 0.0)
    }

    pub fn clip_to(&self, g: ImageGeometry) -> PixelBox {
        PixelBox {
            x_min: self.x_min.clamp(0.0, g.width()),
            y_min: self.y_min.clamp(0.0, g.height()),
            x_max: self.x_max.clamp(0.0, g.width()),
            y_max: self.y_max.clamp(0.0, g.height()),
        }
    }

    /// Grows (positive) or shrinks (negative) every edge by `px`.
    pub fn inflate(&self, px: f64) -> PixelBox {
        let b = PixelBox {
            x_min: self.x_min - px,
            y_min: self.y_min - px,
            x_max: self.x_max + px,
            y_max: self.y_max + px,
        };
        if b.x_min > b.x_max || b.y_min > b.y_max {
            let cx = (self.x_min + self.x_max) / 2.0;
            let cy = (self.y_min + self.y_max) / 2.0;
            return PixelBox {
                x_min: cx,
                y_min: cy,
                x_max: cx,
                y_max: cy,
            };
        }
        b
    }
}

pub fn norm_to_pixel(b: &NormBox, g: ImageGeometry) -> PixelBox {
    let (wd, ht) = (g.width(), g.height());
    PixelBox {
        x_min: ((b.cx - b.w / 2.0) * wd).clamp(0.0, wd),
        y_min: ((b.cy - b.h / 2.0) * ht).clamp(0.0, ht),
        x_max: ((b.cx + b.w / 2.0) * wd).clamp(0.0, wd),
        y_max: ((b.cy + b.h / 2.0) * ht).clamp(0.0, ht),
    }
}

/// Inverse of [`norm_to_pixel`]. The box is clipped to the image first; a
/// box with no remaining area is an unusable label.
pub fn pixel_to_norm(b: &PixelBox, g: ImageGeometry, class_id: u32) -> Result<NormBox, ModelError> {
    let c = b.clip_to(g);
    if c.is_degenerate() {
        return Err(ModelError::DegenerateBox(*b));
    }
    let (wd, ht) = (g.width(), g.height());
    Ok(NormBox {
        class_id,
        cx: (c.x_min + c.x_max) / (2.0 * wd),
        cy: (c.y_min + c.y_max) / (2.0 * ht),
        w: (c.x_max - c.x_min) / wd,
        h: (c.y_max - c.y_min) / ht,
    })
}

/// Intersection over union. Zero when the union is empty.
pub fn iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let iw = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let ih = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SelectionMode {
    #[serde(rename = "fixed")]
    FixedBox,
    #[serde(rename = "variable")]
    VariableBox,
}

impl SelectionMode {
    pub fn other(self) -> SelectionMode {
        match self {
            SelectionMode::FixedBox => SelectionMode::VariableBox,
            SelectionMode::VariableBox => SelectionMode::FixedBox,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SelectionMode::FixedBox => "Fixed Box Selection",
            SelectionMode::VariableBox => "Variable Box Selection",
        }
    }
}

impl std::fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SelectionMode::FixedBox => "fixed",
            SelectionMode::VariableBox => "variable",
        })
    }
}

impl std::str::FromStr for SelectionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fixed" => Ok(SelectionMode::FixedBox),
            "variable" => Ok(SelectionMode::VariableBox),
            other => Err(format!("unknown selection mode `{other}` (expected fixed|variable)")),
        }
    }
}

/// Fixed box size shared by every entry of a fixed-box seed, normalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedDims {
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SeedShape {
    Point { cx: f64, cy: f64 },
    Box { cx: f64, cy: f64, w: f64, h: f64 },
}

impl SeedShape {
    pub fn center(&self) -> (f64, f64) {
        match *self {
            SeedShape::Point { cx, cy } | SeedShape::Box { cx, cy, .. } => (cx, cy),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub class_id: u32,
    #[serde(flatten)]
    pub shape: SeedShape,
}

/// Human first-frame labels that start one sequence pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAnnotation {
    pub frame_index: u32,
    pub mode: SelectionMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_dims: Option<FixedDims>,
    pub entries: Vec<SeedEntry>,
}

impl SeedAnnotation {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidSeed(m));
        if self.entries.is_empty() {
            return bad("no entries".into());
        }
        match (self.mode, self.fixed_dims) {
            (SelectionMode::FixedBox, None) => return bad("fixed-box seed needs fixed_dims".into()),
            (SelectionMode::VariableBox, Some(_)) => {
                return bad("variable-box seed must not carry fixed_dims".into())
            }
            (SelectionMode::FixedBox, Some(d)) => {
                if !(d.w > 0.0 && d.w <= 1.0 && d.h > 0.0 && d.h <= 1.0) {
                    return bad(format!("fixed_dims ({}, {}) outside (0,1]", d.w, d.h));
                }
            }
            (SelectionMode::VariableBox, None) => {}
        }
        for (i, e) in self.entries.iter().enumerate() {
            let (cx, cy) = e.shape.center();
            if !((0.0..=1.0).contains(&cx) && (0.0..=1.0).contains(&cy)) {
                return bad(format!("entry {i}: center ({cx}, {cy}) outside the image"));
            }
            match (self.mode, e.shape) {
                (SelectionMode::FixedBox, SeedShape::Box { .. }) => {
                    return bad(format!("entry {i}: fixed-box seeds carry center points only"))
                }
                (SelectionMode::VariableBox, SeedShape::Point { .. }) => {
                    return bad(format!("entry {i}: variable-box seeds carry full boxes"))
                }
                (_, SeedShape::Box { w, h, .. }) => {
                    if !(w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0) {
                        return bad(format!("entry {i}: size ({w}, {h}) outside (0,1]"));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Number of seeded targets.
    pub fn target_count(&self) -> usize {
        self.entries.len()
    }

    /// Initial track states; track ids are entry indices.
    pub fn initial_points(&self) -> Vec<TrackPoint> {
        let dims = self.fixed_dims.unwrap_or(FixedDims { w: 0.0, h: 0.0 });
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let (cx, cy, w, h) = match e.shape {
                    SeedShape::Point { cx, cy } => (cx, cy, dims.w, dims.h),
                    SeedShape::Box { cx, cy, w, h } => (cx, cy, w, h),
                };
                TrackPoint {
                    track_id: i as u32,
                    class_id: e.class_id,
                    cx,
                    cy,
                    w,
                    h,
                    status: TrackStatus::Alive,
                }
            })
            .collect()
    }
}

/// One seed frame plus the window of frames it governs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSequencePair {
    pub seed: SeedAnnotation,
    pub frame_count: u32,
    /// The same frame seeded in the other selection mode, for ablations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alternate: Option<SeedAnnotation>,
}

impl AnnotationSequencePair {
    pub fn new(seed: SeedAnnotation, frame_count: u32) -> Result<Self, ModelError> {
        let p = Self {
            seed,
            frame_count,
            alternate: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.frame_count == 0 {
            return Err(ModelError::InvalidPair("frame_count must be >= 1".into()));
        }
        self.seed.validate()?;
        if let Some(alt) = &self.alternate {
            alt.validate()?;
            if alt.frame_index != self.seed.frame_index {
                return Err(ModelError::InvalidPair(
                    "alternate seed must share the seed frame".into(),
                ));
            }
            if alt.mode == self.seed.mode {
                return Err(ModelError::InvalidPair(
                    "alternate seed must use the other selection mode".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn first_frame(&self) -> u32 {
        self.seed.frame_index
    }

    pub fn last_frame(&self) -> u32 {
        self.seed.frame_index + self.frame_count - 1
    }

    pub fn frame_range(&self) -> RangeInclusive<u32> {
        self.first_frame()..=self.last_frame()
    }

    pub fn overlaps(&self, other: &AnnotationSequencePair) -> bool {
        self.first_frame() <= other.last_frame() && other.first_frame() <= self.last_frame()
    }

    pub fn seed_for(&self, mode: SelectionMode) -> Option<&SeedAnnotation> {
        if self.seed.mode == mode {
            Some(&self.seed)
        } else {
            self.alternate.as_ref().filter(|s| s.mode == mode)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackStatus {
    Alive,
    TerminatedEdge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub track_id: u32,
    pub class_id: u32,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub status: TrackStatus,
}

impl TrackPoint {
    pub fn is_alive(&self) -> bool {
        self.status == TrackStatus::Alive
    }

    /// The label box for this point, clipped to the image. Boxes already
    /// inside the image are copied bit-for-bit.
    pub fn to_norm_box(&self) -> Option<NormBox> {
        NormBox::clipped(self.class_id, self.cx, self.cy, self.w, self.h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackFrame {
    pub frame_index: u32,
    pub points: Vec<TrackPoint>,
}

impl TrackFrame {
    pub fn alive(&self) -> impl Iterator<Item = &TrackPoint> {
        self.points.iter().filter(|p| p.is_alive())
    }
}

/// Propagated point states for one sequence pair. `seed` is the seed-frame
/// state; `frames` covers the following frames of the window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSet {
    pub seed_frame: u32,
    pub geometry: ImageGeometry,
    pub seed: Vec<TrackPoint>,
    pub frames: Vec<TrackFrame>,
}

impl TrackSet {
    /// Alive records over the propagated frames (seed frame excluded).
    pub fn propagated_records(&self) -> usize {
        self.frames.iter().map(|f| f.alive().count()).sum()
    }

    /// Seed instances plus propagated alive records.
    pub fn labeled_instances(&self) -> usize {
        self.seed.len() + self.propagated_records()
    }

    /// All frames of the window, seed frame first.
    pub fn all_frames(&self) -> impl Iterator<Item = (u32, &[TrackPoint], Provenance)> {
        std::iter::once((self.seed_frame, self.seed.as_slice(), Provenance::Manual)).chain(
            self.frames
                .iter()
                .map(|f| (f.frame_index, f.points.as_slice(), Provenance::Propagated)),
        )
    }

    /// Box-only labels for every frame of the window, straight from the
    /// propagated states.
    pub fn to_frame_labels(&self) -> Vec<FrameLabels> {
        self.all_frames()
            .map(|(frame_index, points, provenance)| FrameLabels {
                frame_index,
                boxes: points
                    .iter()
                    .filter(|p| p.is_alive())
                    .filter_map(TrackPoint::to_norm_box)
                    .collect(),
                polygons: Vec::new(),
                provenance,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        use std::collections::HashMap;
        let bad = |m: String| Err(ModelError::InvalidTrackSet(m));
        let mut seeds: HashMap<u32, &TrackPoint> = HashMap::new();
        for p in &self.seed {
            if seeds.insert(p.track_id, p).is_some() {
                return bad(format!("duplicate seed track id {}", p.track_id));
            }
        }
        let mut alive: std::collections::HashSet<u32> = seeds.keys().copied().collect();
        for (k, f) in self.frames.iter().enumerate() {
            let expected = self.seed_frame + 1 + k as u32;
            if f.frame_index != expected {
                return bad(format!("frame {} out of sequence, expected {expected}", f.frame_index));
            }
            let mut next = alive.clone();
            let mut seen = std::collections::HashSet::new();
            for p in &f.points {
                if !seen.insert(p.track_id) {
                    return bad(format!("track {} twice in frame {}", p.track_id, f.frame_index));
                }
                let Some(s) = seeds.get(&p.track_id) else {
                    return bad(format!("unknown track id {}", p.track_id));
                };
                if !alive.contains(&p.track_id) {
                    return bad(format!(
                        "track {} reappears at frame {} after leaving",
                        p.track_id, f.frame_index
                    ));
                }
                if p.class_id != s.class_id {
                    return bad(format!("track {} changed class", p.track_id));
                }
                if p.w != s.w || p.h != s.h {
                    return bad(format!("track {} changed size", p.track_id));
                }
                if p.status == TrackStatus::TerminatedEdge {
                    next.remove(&p.track_id);
                }
            }
            // Tracks absent from a frame are gone for good.
            next.retain(|id| seen.contains(id));
            alive = next;
        }
        Ok(())
    }
}

/// Binary foreground mask for one target instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    geometry: ImageGeometry,
    words: Vec<u64>,
}

impl MaskGrid {
    pub fn new(geometry: ImageGeometry) -> Self {
        Self {
            geometry,
            words: vec![0; geometry.pixel_count().div_ceil(64)],
        }
    }

    pub fn from_fn(geometry: ImageGeometry, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut m = Self::new(geometry);
        for y in 0..geometry.height_px() {
            for x in 0..geometry.width_px() {
                if f(x, y) {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    pub fn geometry(&self) -> ImageGeometry {
        self.geometry
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        y as usize * self.geometry.width_px() as usize + x as usize
    }

    /// Panics when `(x, y)` is outside the grid.
    pub fn set(&mut self, x: u32, y: u32, on: bool) {
        assert!(
            x < self.geometry.width_px() && y < self.geometry.height_px(),
            "pixel ({x}, {y}) outside mask"
        );
        let i = self.offset(x, y);
        if on {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    /// Out-of-bounds reads are background.
    pub fn get(&self, x: i64, y: i64) -> bool {
        if x < 0
            || y < 0
            || x >= i64::from(self.geometry.width_px())
            || y >= i64::from(self.geometry.height_px())
        {
            return false;
        }
        let i = self.offset(x as u32, y as u32);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    /// Set pixels in row-major order.
    pub fn iter_set(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let width = self.geometry.width_px() as usize;
        let total = self.geometry.pixel_count();
        self.words.iter().enumerate().flat_map(move |(wi, &word)| {
            let mut bits = word;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let b = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(wi * 64 + b)
            })
            .filter(move |&i| i < total)
            .map(move |i| ((i % width) as u32, (i / width) as u32))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonLabel {
    pub class_id: u32,
    /// Normalized vertices; the ring closes implicitly.
    pub vertices: Vec<(f64, f64)>,
}

impl PolygonLabel {
    pub fn new(class_id: u32, vertices: Vec<(f64, f64)>) -> Result<Self, ModelError> {
        let p = Self { class_id, vertices };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vertices.len() < 3 {
            return Err(ModelError::InvalidPolygon(format!(
                "{} vertices, need at least 3",
                self.vertices.len()
            )));
        }
        if self
            .vertices
            .iter()
            .any(|&(x, y)| !((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y)))
        {
            return Err(ModelError::InvalidPolygon("vertex outside [0,1]".into()));
        }
        if self.vertices.first() == self.vertices.last() {
            return Err(ModelError::InvalidPolygon(
                "ring must not repeat its first vertex".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Manual,
    Propagated,
    Inferred,
}

/// Labels for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLabels {
    pub frame_index: u32,
    #[serde(default)]
    pub boxes: Vec<NormBox>,
    #[serde(default)]
    pub polygons: Vec<PolygonLabel>,
    pub provenance: Provenance,
}

impl FrameLabels {
    pub fn empty(frame_index: u32, provenance: Provenance) -> Self {
        Self {
            frame_index,
            boxes: Vec::new(),
            polygons: Vec::new(),
            provenance,
        }
    }
}
