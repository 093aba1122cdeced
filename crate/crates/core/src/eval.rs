//! Detection metrics: greedy matching, precision/recall/F1, FP%/FN%,
//! 101-point AP, mAP50 and mAP over IoU 0.50:0.05:0.95, plus the throughput
//! and annotation-ratio reports.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::detector::{Detection, Detections};
use crate::model::{iou, NormBox};
use crate::store::{GroundTruth, JobRecord, JobStatus};

pub const CSV_HEADER: &str = "Method,Precision,Recall%,TP,FP,FP%,FN,FN%,mAP50,mAP,F1";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ground truth is empty; metrics are undefined")]
    EmptyGroundTruth,
    #[error("invalid match config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub iou_threshold: f64,
    pub confidence_floor: f64,
    pub class_agnostic: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            confidence_floor: 0.2,
            class_agnostic: false,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        for (name, v) in [("iou_threshold", self.iou_threshold), ("confidence_floor", self.confidence_floor)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(EvalError::Config(format!("{name} {v} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

fn box_iou(a: &NormBox, b: &NormBox) -> f64 {
    iou(&a.unit_corners(), &b.unit_corners())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameMatch {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `(detection index, gt index, iou)` for each true positive.
    pub pairs: Vec<(usize, usize, f64)>,
    /// Per input detection: `Some(true)` TP, `Some(false)` FP, `None` below
    /// the confidence floor.
    pub outcome: Vec<Option<bool>>,
}

/// Greedy matching in descending confidence. Ties go to the detection with
/// the higher best IoU against eligible ground truth, then to the lower
/// index. Each detection takes the unmatched eligible box with the highest
/// IoU at or above the threshold (lower index on ties).
pub fn match_frame(gt: &[NormBox], dets: &[Detection], cfg: &MatchConfig) -> FrameMatch {
    let same = |d: &Detection, g: &NormBox| cfg.class_agnostic || d.class_id() == g.class_id;
    let ious: Vec<Vec<f64>> = dets
        .iter()
        .map(|d| {
            gt.iter()
                .map(|g| if same(d, g) { box_iou(&d.norm_box, g) } else { -1.0 })
                .collect()
        })
        .collect();
    let best: Vec<f64> = ious
        .iter()
        .map(|row| row.iter().copied().fold(0.0, f64::max))
        .collect();
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].confidence >= cfg.confidence_floor)
        .collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .total_cmp(&dets[a].confidence)
            .then(best[b].total_cmp(&best[a]))
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; gt.len()];
    let mut m = FrameMatch {
        outcome: vec![None; dets.len()],
        ..FrameMatch::default()
    };
    for i in order {
        let mut pick: Option<(usize, f64)> = None;
        for (j, &v) in ious[i].iter().enumerate() {
            if taken[j] || v < cfg.iou_threshold {
                continue;
            }
            if pick.is_none_or(|(_, pv)| v > pv) {
                pick = Some((j, v));
            }
        }
        match pick {
            Some((j, v)) => {
                taken[j] = true;
                m.tp += 1;
                m.pairs.push((i, j, v));
                m.outcome[i] = Some(true);
            }
            None => {
                m.fp += 1;
                m.outcome[i] = Some(false);
            }
        }
    }
    m.fn_ = gt.len() - m.tp;
    m
}

/// 101-point interpolated AP from ranked `(confidence, is_tp)` pairs and the
/// number of ground-truth instances. `None` when there is no ground truth.
pub fn average_precision(ranked: &[(f64, bool)], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..ranked.len()).collect();
    order.sort_by(|&a, &b| ranked[b].0.total_cmp(&ranked[a].0));
    let mut prec = Vec::with_capacity(order.len());
    let mut rec = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (k, &i) in order.iter().enumerate() {
        if ranked[i].1 {
            tp += 1;
        }
        prec.push(tp as f64 / (k + 1) as f64);
        rec.push(tp as f64 / n_gt as f64);
    }
    // Monotone envelope, right to left.
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        while k < rec.len() && rec[k] < r {
            k += 1;
        }
        if k < rec.len() {
            sum += prec[k];
        }
    }
    Some(sum / 101.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: u32,
    pub total_gt: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub ap50: Option<f64>,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total_gt: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fp_pct: f64,
    pub fn_pct: f64,
    pub map50: Option<f64>,
    pub map: Option<f64>,
    #[serde(default)]
    pub per_class: Vec<ClassReport>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl EvalReport {
    /// Count metrics from raw counts; total ground truth is `tp + fn`.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let total_gt = tp + fn_;
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, total_gt);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            total_gt,
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
            fp_pct: ratio(fp, total_gt),
            fn_pct: ratio(fn_, total_gt),
            map50: None,
            map: None,
            per_class: Vec::new(),
        }
    }

    /// One CSV row under [`CSV_HEADER`]; fractions are printed as percents.
    pub fn csv_row(&self, method: &str) -> String {
        let pct = |v: f64| format!("{:.2}", v * 100.0);
        let opt = |v: Option<f64>| v.map(pct).unwrap_or_default();
        let method = if method.contains(',') || method.contains('"') {
            format!("\"{}\"", method.replace('"', "\"\""))
        } else {
            method.to_string()
        };
        format!(
            "{method},{},{},{},{},{},{},{},{},{},{}",
            pct(self.precision),
            pct(self.recall),
            self.tp,
            self.fp,
            pct(self.fp_pct),
            self.fn_,
            pct(self.fn_pct),
            opt(self.map50),
            opt(self.map),
            pct(self.f1)
        )
    }
}

/// Rows of `(method, report)` as a CSV table.
pub fn reports_csv(rows: &[(String, EvalReport)]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for (m, r) in rows {
        out.push_str(&r.csv_row(m));
        out.push('\n');
    }
    out
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Evaluates detections against ground truth over the ground-truth frames.
/// Detections on frames without ground truth are not scored.
pub fn evaluate(gt: &GroundTruth, dets: &Detections, cfg: &MatchConfig) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let total: usize = gt.values().map(|l| l.boxes.len()).sum();
    if total == 0 {
        return Err(EvalError::EmptyGroundTruth);
    }
    let unscored = dets.keys().filter(|f| !gt.contains_key(f)).count();
    if unscored > 0 {
        debug!(frames = unscored, "detections on frames without ground truth are not scored");
    }
    let empty = Vec::new();
    let class_of = |c: u32| if cfg.class_agnostic { 0 } else { c };

    let mut gt_per_class: BTreeMap<u32, usize> = BTreeMap::new();
    for l in gt.values() {
        for b in &l.boxes {
            *gt_per_class.entry(class_of(b.class_id)).or_default() += 1;
        }
    }

    // Matching at every COCO threshold; counts come from cfg's threshold.
    let mut thresholds: Vec<f64> = coco_thresholds().to_vec();
    if !thresholds.contains(&cfg.iou_threshold) {
        thresholds.push(cfg.iou_threshold);
    }
    let mut ap_at: BTreeMap<u64, BTreeMap<u32, f64>> = BTreeMap::new();
    let mut counts: BTreeMap<u32, (usize, usize, usize)> = BTreeMap::new();
    for &t in &thresholds {
        let tcfg = MatchConfig {
            iou_threshold: t,
            ..*cfg
        };
        let mut ranked: BTreeMap<u32, Vec<(f64, bool)>> = BTreeMap::new();
        let mut c: BTreeMap<u32, (usize, usize, usize)> = BTreeMap::new();
        for (frame, labels) in gt {
            let d = dets.get(frame).unwrap_or(&empty);
            let m = match_frame(&labels.boxes, d, &tcfg);
            for (i, o) in m.outcome.iter().enumerate() {
                if let Some(is_tp) = *o {
                    let k = class_of(d[i].class_id());
                    ranked.entry(k).or_default().push((d[i].confidence, is_tp));
                    let e = c.entry(k).or_default();
                    if is_tp {
                        e.0 += 1;
                    } else {
                        e.1 += 1;
                    }
                }
            }
            for b in &labels.boxes {
                c.entry(class_of(b.class_id)).or_default();
            }
        }
        for (&k, n) in &gt_per_class {
            if let Some(e) = c.get_mut(&k) {
                e.2 = n - e.0;
            }
        }
        let mut aps = BTreeMap::new();
        for (&k, &n) in &gt_per_class {
            let r = ranked.get(&k).map(Vec::as_slice).unwrap_or(&[]);
            if let Some(ap) = average_precision(r, n) {
                aps.insert(k, ap);
            }
        }
        let extra: BTreeSet<u32> = ranked.keys().filter(|k| !gt_per_class.contains_key(k)).copied().collect();
        if !extra.is_empty() {
            debug!(?extra, "classes without ground truth are left out of the AP mean");
        }
        if t == cfg.iou_threshold {
            counts = c;
        }
        ap_at.insert(t.to_bits(), aps);
    }

    let tp: usize = counts.values().map(|c| c.0).sum();
    let fp: usize = counts.values().map(|c| c.1).sum();
    let fn_ = total - tp;
    let mut report = EvalReport::from_counts(tp, fp, fn_);
    let ap50 = &ap_at[&0.5f64.to_bits()];
    report.map50 = mean(&ap50.values().copied().collect::<Vec<_>>());
    let per_threshold: Vec<f64> = coco_thresholds()
        .iter()
        .filter_map(|t| mean(&ap_at[&t.to_bits()].values().copied().collect::<Vec<_>>()))
        .collect();
    report.map = mean(&per_threshold);
    report.per_class = gt_per_class
        .iter()
        .map(|(&k, &n)| {
            let (tp, fp, _) = counts.get(&k).copied().unwrap_or_default();
            let aps: Vec<f64> = coco_thresholds()
                .iter()
                .filter_map(|t| ap_at[&t.to_bits()].get(&k).copied())
                .collect();
            ClassReport {
                class_id: k,
                total_gt: n,
                tp,
                fp,
                fn_: n - tp,
                ap50: ap50.get(&k).copied(),
                ap: mean(&aps),
            }
        })
        .collect();
    if let (Some(m), Some(m50)) = (report.map, report.map50) {
        if m > m50 + 1e-12 {
            warn!(map = m, map50 = m50, "mAP exceeds mAP50");
        }
    }
    Ok(report)
}

/// How several per-video reports are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Counts pooled across videos; mAP averaged over videos.
    Micro,
    /// Every metric averaged over videos.
    Macro,
}

pub fn combine(reports: &[EvalReport], how: Averaging) -> Option<EvalReport> {
    if reports.is_empty() {
        return None;
    }
    let opt_mean = |f: fn(&EvalReport) -> Option<f64>| {
        let v: Vec<f64> = reports.iter().filter_map(f).collect();
        mean(&v)
    };
    let tp = reports.iter().map(|r| r.tp).sum();
    let fp = reports.iter().map(|r| r.fp).sum();
    let fn_ = reports.iter().map(|r| r.fn_).sum();
    let mut out = EvalReport::from_counts(tp, fp, fn_);
    if how == Averaging::Macro {
        let avg = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / reports.len() as f64;
        out.precision = avg(|r| r.precision);
        out.recall = avg(|r| r.recall);
        out.f1 = avg(|r| r.f1);
        out.fp_pct = avg(|r| r.fp_pct);
        out.fn_pct = avg(|r| r.fn_pct);
    }
    out.map50 = opt_mean(|r| r.map50);
    out.map = opt_mean(|r| r.map);
    Some(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub stages: Vec<(String, f64)>,
    pub total_seconds: f64,
    pub frames: u64,
    pub fps: f64,
}

pub fn throughput_report(stages: &[(String, f64)], frames: u64) -> ThroughputReport {
    let total_seconds: f64 = stages.iter().map(|s| s.1).sum();
    let fps = if frames == 0 || total_seconds <= 0.0 {
        0.0
    } else {
        frames as f64 / total_seconds
    };
    ThroughputReport {
        stages: stages.to_vec(),
        total_seconds,
        frames,
        fps,
    }
}

/// Throughput over finished jobs, with optional manual seeding seconds.
pub fn throughput_from_jobs(jobs: &[JobRecord], manual_seconds: Option<f64>, frames: u64) -> ThroughputReport {
    let mut stages: Vec<(String, f64)> = Vec::new();
    if let Some(s) = manual_seconds {
        stages.push(("seed".into(), s));
    }
    for j in jobs.iter().filter(|j| j.status == JobStatus::Done) {
        stages.push((j.stage.name().to_string(), j.wall_seconds.unwrap_or(0.0)));
    }
    throughput_report(&stages, frames)
}

/// Inferred frames per seed frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRatio {
    pub seed_frames: u64,
    pub inferred_frames: u64,
}

impl AnnotationRatio {
    pub fn value(&self) -> f64 {
        if self.seed_frames == 0 {
            0.0
        } else {
            self.inferred_frames as f64 / self.seed_frames as f64
        }
    }

    /// `1:k` with `k` rounded down.
    pub fn display(&self) -> String {
        format!("1:{}", self.value().floor() as u64)
    }
}
