//! Semi-supervised video annotation engine.
//!
//! A handful of human-labelled seed frames are propagated through the video
//! by a point tracker, tightened by a segmenter, emitted as a YOLO dataset,
//! used to train a detector, and the detector's output over the whole video
//! is scored against ground truth.

pub mod dataset;
pub mod detector;
pub mod eval;
pub mod format;
pub mod model;
pub mod pipeline;
pub mod propagation;
pub mod scene;
pub mod segfit;
pub mod store;
pub mod wire;

pub use dataset::{AblationTag, DatasetSpec, DatasetVariant};
pub use detector::{Detection, Detections, DetectorBackend, ReferenceDetector, TrainSpec};
pub use eval::{EvalReport, MatchConfig};
pub use model::{
    iou, norm_to_pixel, pixel_to_norm, AnnotationSequencePair, FrameLabels, ImageGeometry,
    MaskGrid, NormBox, PixelBox, PolygonLabel, Provenance, SeedAnnotation, SelectionMode,
    TrackSet,
};
pub use pipeline::{ablation_sweep, run_pipeline, Backends, PipelineConfig, PipelineError, RunOptions};
pub use propagation::{FilterConfig, OracleTracker, TrackerBackend};
pub use scene::{SceneParams, SyntheticScene};
pub use segfit::{OracleSegmenter, SegfitConfig, SegmenterBackend};
pub use store::{JobRecord, Project, ProjectStore, Stage};
pub use wire::{BackendError, BackendInfo, ProcessBackend};
