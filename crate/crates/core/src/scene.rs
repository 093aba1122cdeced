//! Synthetic scenes: parametric moving shapes with exact rasterized ground
//! truth. The oracle tracker and segmenter answer from a scene, so whole
//! pipeline runs can be checked without neural backends.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{
    pixel_to_norm, FixedDims, FrameLabels, ImageGeometry, MaskGrid, PixelBox, Provenance,
    SeedAnnotation, SeedEntry, SeedShape, SelectionMode,
};
use crate::store::GroundTruth;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rect,
    Ellipse,
}

/// A target moving linearly: `center(t) = center + t * velocity`, pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTarget {
    pub id: u32,
    pub class_id: u32,
    pub kind: ShapeKind,
    pub center: (f64, f64),
    pub size: (f64, f64),
    pub velocity: (f64, f64),
}

impl SceneTarget {
    pub fn center_at(&self, frame: u32) -> (f64, f64) {
        let t = f64::from(frame);
        (
            self.center.0 + t * self.velocity.0,
            self.center.1 + t * self.velocity.1,
        )
    }

    /// Continuous extent at a frame, unclipped.
    pub fn extent_at(&self, frame: u32) -> PixelBox {
        let (cx, cy) = self.center_at(frame);
        PixelBox {
            x_min: cx - self.size.0 / 2.0,
            y_min: cy - self.size.1 / 2.0,
            x_max: cx + self.size.0 / 2.0,
            y_max: cy + self.size.1 / 2.0,
        }
    }

    /// Whether the pixel whose center is `(x + 0.5, y + 0.5)` is covered.
    pub fn covers(&self, frame: u32, x: i64, y: i64) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let e = self.extent_at(frame);
        match self.kind {
            ShapeKind::Rect => px >= e.x_min && px < e.x_max && py >= e.y_min && py < e.y_max,
            ShapeKind::Ellipse => {
                let (cx, cy) = self.center_at(frame);
                let dx = (px - cx) / (self.size.0 / 2.0);
                let dy = (py - cy) / (self.size.1 / 2.0);
                dx * dx + dy * dy < 1.0
            }
        }
    }

    /// Pixel index range worth scanning for this target, clipped to `g`.
    fn scan_window(&self, frame: u32, g: ImageGeometry) -> Option<(u32, u32, u32, u32)> {
        let e = self.extent_at(frame);
        let x0 = (e.x_min - 1.0).floor().max(0.0);
        let y0 = (e.y_min - 1.0).floor().max(0.0);
        let x1 = (e.x_max + 1.0).ceil().min(g.width());
        let y1 = (e.y_max + 1.0).ceil().min(g.height());
        (x0 < x1 && y0 < y1).then_some((x0 as u32, y0 as u32, x1 as u32, y1 as u32))
    }

    /// Covered pixels inside the image, optionally restricted to a window.
    pub fn pixels(
        &self,
        frame: u32,
        g: ImageGeometry,
        within: Option<&PixelBox>,
    ) -> impl Iterator<Item = (u32, u32)> + '_ {
        let (x0, y0, x1, y1) = self.scan_window(frame, g).unwrap_or((0, 0, 0, 0));
        let within = within.copied();
        (y0..y1)
            .flat_map(move |y| (x0..x1).map(move |x| (x, y)))
            .filter(move |&(x, y)| self.covers(frame, i64::from(x), i64::from(y)))
            .filter(move |&(x, y)| {
                within.is_none_or(|w| {
                    let (px, py) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
                    px >= w.x_min && px < w.x_max && py >= w.y_min && py < w.y_max
                })
            })
    }

    /// Tight box of the visible rasterized shape (exclusive max edges).
    pub fn raster_box(&self, frame: u32, g: ImageGeometry) -> Option<PixelBox> {
        let mut b: Option<(u32, u32, u32, u32)> = None;
        for (x, y) in self.pixels(frame, g, None) {
            b = Some(match b {
                None => (x, y, x, y),
                Some((a, c, d, e)) => (a.min(x), c.min(y), d.max(x), e.max(y)),
            });
        }
        b.map(|(x0, y0, x1, y1)| PixelBox {
            x_min: f64::from(x0),
            y_min: f64::from(y0),
            x_max: f64::from(x1 + 1),
            y_max: f64::from(y1 + 1),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub geometry: ImageGeometry,
    pub frame_count: u32,
    pub targets: Vec<SceneTarget>,
}

/// Knobs for [`SyntheticScene::generate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub geometry: ImageGeometry,
    pub frame_count: u32,
    /// Targets that stay in view, drifting slowly.
    pub drifting: usize,
    /// Targets that leave through an image border early in the video.
    pub exiting: usize,
    pub min_size_px: f64,
    pub max_size_px: f64,
    pub drift_speed_px: f64,
    pub exit_speed_px: (f64, f64),
    pub class_count: u32,
    pub ellipse_fraction: f64,
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            geometry: ImageGeometry::DEFAULT,
            frame_count: 60,
            drifting: 12,
            exiting: 3,
            min_size_px: 48.0,
            max_size_px: 110.0,
            drift_speed_px: 0.25,
            exit_speed_px: (6.0, 10.0),
            class_count: 1,
            ellipse_fraction: 0.0,
            seed: 7,
        }
    }
}

fn separated(a: &PixelBox, b: &PixelBox, gap: f64) -> bool {
    a.x_max + gap <= b.x_min
        || b.x_max + gap <= a.x_min
        || a.y_max + gap <= b.y_min
        || b.y_max + gap <= a.y_min
}

fn hull(a: &PixelBox, b: &PixelBox) -> PixelBox {
    PixelBox {
        x_min: a.x_min.min(b.x_min),
        y_min: a.y_min.min(b.y_min),
        x_max: a.x_max.max(b.x_max),
        y_max: a.y_max.max(b.y_max),
    }
}

impl SyntheticScene {
    /// Deterministic scene for the given parameters. Targets never overlap
    /// over the whole video.
    pub fn generate(p: &SceneParams) -> Result<Self, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let (wd, ht) = (p.geometry.width(), p.geometry.height());
        let last = p.frame_count.saturating_sub(1);
        let mut targets: Vec<SceneTarget> = Vec::new();
        let mut swept: Vec<PixelBox> = Vec::new();
        let total = p.drifting + p.exiting;
        let mut attempts = 0;
        while targets.len() < total {
            attempts += 1;
            if attempts > 200_000 {
                return Err(format!(
                    "could not place {total} non-overlapping targets in {}x{}",
                    p.geometry.width_px(),
                    p.geometry.height_px()
                ));
            }
            let idx = targets.len();
            let size = (
                rng.random_range(p.min_size_px..=p.max_size_px),
                rng.random_range(p.min_size_px..=p.max_size_px),
            );
            let (center, velocity) = if idx < p.exiting {
                let speed = rng.random_range(p.exit_speed_px.0..=p.exit_speed_px.1);
                let inset = rng.random_range(10.0..40.0);
                match idx % 4 {
                    0 => (
                        (wd - size.0 / 2.0 - inset, rng.random_range(size.1..ht - size.1)),
                        (speed, 0.0),
                    ),
                    1 => (
                        (size.0 / 2.0 + inset, rng.random_range(size.1..ht - size.1)),
                        (-speed, 0.0),
                    ),
                    2 => (
                        (rng.random_range(size.0..wd - size.0), ht - size.1 / 2.0 - inset),
                        (0.0, speed),
                    ),
                    _ => (
                        (rng.random_range(size.0..wd - size.0), size.1 / 2.0 + inset),
                        (0.0, -speed),
                    ),
                }
            } else {
                let mx = 150.0 + size.0 / 2.0;
                let my = 100.0 + size.1 / 2.0;
                if mx >= wd - mx || my >= ht - my {
                    return Err("image too small for drifting targets".into());
                }
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let speed = rng.random_range(0.0..=p.drift_speed_px);
                (
                    (rng.random_range(mx..wd - mx), rng.random_range(my..ht - my)),
                    (speed * angle.cos(), speed * angle.sin()),
                )
            };
            let kind = if rng.random_bool(p.ellipse_fraction.clamp(0.0, 1.0)) {
                ShapeKind::Ellipse
            } else {
                ShapeKind::Rect
            };
            let t = SceneTarget {
                id: idx as u32,
                class_id: rng.random_range(0..p.class_count.max(1)),
                kind,
                center,
                size,
                velocity,
            };
            let sweep = hull(&t.extent_at(0), &t.extent_at(last));
            if swept.iter().all(|s| separated(s, &sweep, 24.0)) {
                swept.push(sweep);
                targets.push(t);
            }
        }
        Ok(Self {
            geometry: p.geometry,
            frame_count: p.frame_count,
            targets,
        })
    }

    pub fn target(&self, id: u32) -> Option<&SceneTarget> {
        self.targets.iter().find(|t| t.id == id)
    }

    /// Exact labels for every frame, from the rasterized shapes.
    pub fn ground_truth(&self) -> GroundTruth {
        (0..self.frame_count)
            .map(|f| {
                let boxes = self
                    .targets
                    .iter()
                    .filter_map(|t| {
                        let pb = t.raster_box(f, self.geometry)?;
                        pixel_to_norm(&pb, self.geometry, t.class_id).ok()
                    })
                    .collect();
                (
                    f,
                    FrameLabels {
                        frame_index: f,
                        boxes,
                        polygons: Vec::new(),
                        provenance: Provenance::Manual,
                    },
                )
            })
            .collect()
    }

    /// Ground truth as MOT CSV rows (1-based frames, pixel boxes).
    pub fn to_mot_csv(&self) -> String {
        let mut out = String::new();
        for f in 0..self.frame_count {
            for t in &self.targets {
                if let Some(b) = t.raster_box(f, self.geometry) {
                    out.push_str(&format!(
                        "{},{},{},{},{},{},1,{},1\n",
                        f + 1,
                        t.id + 1,
                        b.x_min,
                        b.y_min,
                        b.width(),
                        b.height(),
                        t.class_id + 1
                    ));
                }
            }
        }
        out
    }

    /// What a careful annotator would seed at `frame`: every target whose
    /// center is in view. Fixed-box seeds use the mean visible box size.
    pub fn seed_annotation(&self, frame: u32, mode: SelectionMode) -> Result<SeedAnnotation, String> {
        let g = self.geometry;
        let visible: Vec<(u32, PixelBox)> = self
            .targets
            .iter()
            .filter(|t| {
                let (cx, cy) = t.center_at(frame);
                cx > 0.0 && cy > 0.0 && cx < g.width() && cy < g.height()
            })
            .filter_map(|t| Some((t.class_id, t.raster_box(frame, g)?)))
            .collect();
        if visible.is_empty() {
            return Err(format!("no target visible at frame {frame}"));
        }
        let boxes: Vec<_> = visible
            .iter()
            .map(|(c, b)| pixel_to_norm(b, g, *c).map_err(|e| e.to_string()))
            .collect::<Result<_, _>>()?;
        let n = boxes.len() as f64;
        let (fixed_dims, entries) = match mode {
            SelectionMode::FixedBox => (
                Some(FixedDims {
                    w: boxes.iter().map(|b| b.w).sum::<f64>() / n,
                    h: boxes.iter().map(|b| b.h).sum::<f64>() / n,
                }),
                boxes
                    .iter()
                    .map(|b| SeedEntry {
                        class_id: b.class_id,
                        shape: SeedShape::Point { cx: b.cx, cy: b.cy },
                    })
                    .collect(),
            ),
            SelectionMode::VariableBox => (
                None,
                boxes
                    .iter()
                    .map(|b| SeedEntry {
                        class_id: b.class_id,
                        shape: SeedShape::Box {
                            cx: b.cx,
                            cy: b.cy,
                            w: b.w,
                            h: b.h,
                        },
                    })
                    .collect(),
            ),
        };
        Ok(SeedAnnotation {
            frame_index: frame,
            mode,
            fixed_dims,
            entries,
        })
    }

    /// Grayscale rendering of a frame: dark background, bright targets.
    pub fn render_frame(&self, frame: u32) -> image::GrayImage {
        let g = self.geometry;
        let mut img = image::GrayImage::from_pixel(g.width_px(), g.height_px(), image::Luma([32]));
        for t in &self.targets {
            let shade = 160 + (t.id % 4) as u8 * 24;
            for (x, y) in t.pixels(frame, g, None) {
                img.put_pixel(x, y, image::Luma([shade]));
            }
        }
        img
    }

    /// Renders every frame as `NNNNNN.png` under `dir`.
    pub fn write_frames(&self, dir: &std::path::Path) -> image::ImageResult<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir)?;
        (0..self.frame_count)
            .into_par_iter()
            .map(|f| {
                let p = dir.join(format!("{}.png", crate::store::frame_stem(f)));
                self.render_frame(f).save(&p)?;
                Ok(p)
            })
            .collect()
    }

    /// Rasterizes one target into a mask, optionally restricted to a window.
    pub fn rasterize(&self, target: &SceneTarget, frame: u32, within: Option<&PixelBox>) -> MaskGrid {
        let mut m = MaskGrid::new(self.geometry);
        for (x, y) in target.pixels(frame, self.geometry, within) {
            m.set(x, y, true);
        }
        m
    }
}
