//! Pipeline config from a file plus command-line overrides.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use seedprop_core::dataset::DatasetVariant;
use seedprop_core::pipeline::{BackendSpec, BackendsConfig, GroundTruthSource, OracleOptions};
use seedprop_core::store::GroundTruthFormat;
use seedprop_core::{PipelineConfig, SelectionMode};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Mode {
    Fixed,
    Variable,
}

impl From<Mode> for SelectionMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Fixed => SelectionMode::FixedBox,
            Mode::Variable => SelectionMode::VariableBox,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Variant {
    Detect,
    Segment,
}

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
pub enum GtFormat {
    Yolo,
    #[default]
    Mot,
}

#[derive(Debug, Clone, Default, Args)]
pub struct PipelineArgs {
    /// Base config file; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Synthetic scene file; answers tracking and segmentation in-process.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Tracker backend command, whitespace separated.
    #[arg(long)]
    pub tracker_cmd: Option<String>,
    /// Segmenter backend command, whitespace separated.
    #[arg(long)]
    pub segmenter_cmd: Option<String>,
    /// Detector backend command; the built-in reference detector otherwise.
    #[arg(long)]
    pub detector_cmd: Option<String>,
    /// Seconds to wait for any backend reply.
    #[arg(long)]
    pub backend_timeout: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long, overrides_with = "no_filter")]
    pub filter: bool,
    #[arg(long, overrides_with = "filter")]
    pub no_filter: bool,
    #[arg(long, overrides_with = "no_sam")]
    pub sam: bool,
    #[arg(long, overrides_with = "sam")]
    pub no_sam: bool,
    #[arg(long)]
    pub edge_margin: Option<f64>,
    #[arg(long)]
    pub chunk_length: Option<usize>,
    /// Pair indices to use, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub pairs: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Ground-truth labels for evaluation.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "mot")]
    pub gt_format: GtFormat,
    /// Seconds spent seeding by hand, added to the throughput report.
    #[arg(long)]
    pub manual_seconds: Option<f64>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub confidence: Option<f64>,
    #[arg(long)]
    pub iou: Option<f64>,
}

fn split_command(s: &str) -> Result<Vec<String>> {
    let parts: Vec<String> = s.split_whitespace().map(str::to_string).collect();
    if parts.is_empty() {
        bail!("empty backend command");
    }
    Ok(parts)
}

/// Configs hash their paths, so store them absolute.
fn absolute(p: &std::path::Path) -> Result<PathBuf> {
    std::path::absolute(p).with_context(|| format!("resolving {}", p.display()))
}

fn on_off(on: bool, off: bool) -> Option<bool> {
    match (on, off) {
        (true, _) => Some(true),
        (_, true) => Some(false),
        _ => None,
    }
}

impl PipelineArgs {
    pub fn build(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                PipelineConfig::from_json(&text).with_context(|| format!("in {}", p.display()))?
            }
            None => {
                let Some(scene) = &self.scene else {
                    if self.tracker_cmd.is_none() || self.segmenter_cmd.is_none() {
                        bail!("give --config, --scene, or both --tracker-cmd and --segmenter-cmd");
                    }
                    // Both placeholders are replaced by the commands in apply().
                    return self.apply(PipelineConfig::new(BackendsConfig {
                        tracker: BackendSpec::Reference,
                        segmenter: BackendSpec::Reference,
                        detector: BackendSpec::Reference,
                    }));
                };
                PipelineConfig::oracle(&absolute(scene)?)
            }
        };
        if let (Some(scene), Some(_)) = (&self.scene, &self.config) {
            let oracle = BackendSpec::Oracle {
                scene: absolute(scene)?,
                options: OracleOptions::default(),
            };
            cfg.backends.tracker = oracle.clone();
            cfg.backends.segmenter = oracle;
        }
        self.apply(cfg)
    }

    fn apply(&self, mut cfg: PipelineConfig) -> Result<PipelineConfig> {
        let timeout = self.backend_timeout.unwrap_or(600.0);
        let process = |cmd: &str| -> Result<BackendSpec> {
            Ok(BackendSpec::Process {
                command: split_command(cmd)?,
                timeout_seconds: timeout,
            })
        };
        if let Some(c) = &self.tracker_cmd {
            cfg.backends.tracker = process(c)?;
        }
        if let Some(c) = &self.segmenter_cmd {
            cfg.backends.segmenter = process(c)?;
        }
        if let Some(c) = &self.detector_cmd {
            cfg.backends.detector = process(c)?;
        }
        if let Some(m) = self.mode {
            cfg.mode = m.into();
        }
        if let Some(f) = on_off(self.filter, self.no_filter) {
            cfg.filter.enabled = f;
        }
        if let Some(s) = on_off(self.sam, self.no_sam) {
            cfg.segfit.enabled = s;
        }
        if let Some(m) = self.edge_margin {
            cfg.filter.edge_margin = m;
        }
        if let Some(c) = self.chunk_length {
            cfg.chunk_length = c;
        }
        if let Some(p) = &self.pairs {
            cfg.pairs = Some(p.clone());
        }
        if let Some(v) = self.variant {
            cfg.variant = match v {
                Variant::Detect => DatasetVariant::Detect,
                Variant::Segment => DatasetVariant::Segment,
            };
        }
        if let Some(f) = self.train_fraction {
            cfg.train_fraction = f;
        }
        if let Some(gt) = &self.gt {
            cfg.ground_truth = Some(GroundTruthSource {
                path: absolute(gt)?,
                format: match self.gt_format {
                    GtFormat::Yolo => GroundTruthFormat::YoloTxtDir,
                    GtFormat::Mot => GroundTruthFormat::MotCsv,
                },
            });
        }
        if let Some(s) = self.manual_seconds {
            cfg.manual_seconds = Some(s);
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(c) = self.confidence {
            cfg.train.confidence = c;
            cfg.matching.confidence_floor = c;
        }
        if let Some(i) = self.iou {
            cfg.matching.iou_threshold = i;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
