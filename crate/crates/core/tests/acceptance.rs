//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seedprop_core::dataset::{emit_dataset, read_dataset};
use seedprop_core::eval::{average_precision, match_frame, throughput_report};
use seedprop_core::format::{format_box_line, parse_box_line};
use seedprop_core::model::SeedEntry;
use seedprop_core::pipeline::{GroundTruthSource, RunOptions};
use seedprop_core::propagation::{propagate_pair, window_refs, TrackerRequest};
use seedprop_core::segfit::contour::{extract_contour, min_bounding_box};
use seedprop_core::store::{mot_to_ground_truth, GroundTruthFormat, FRAMES_DIR};
use seedprop_core::*;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- arithmetic

fn table_rows() -> Outcome {
    // (tp, fp, fn, total) -> precision, recall, F1, FP%, FN%
    let rows = [
        ((203998, 21196, 51237, 255235), [90.59, 79.93, 84.92, 8.30, 20.07]),
        ((156536, 62269, 98699, 255235), [71.54, 61.33, 66.04, 24.40, 38.67]),
        ((332377, 49632, 96376, 428753), [87.01, 77.52, 81.21, 11.58, 22.48]),
    ];
    let names = ["precision", "recall", "F1", "FP%", "FN%"];
    let mut off = Vec::new();
    for ((tp, fp, fn_, total), want) in rows {
        let r = EvalReport::from_counts(tp, fp, fn_);
        check(r.total_gt == total, || format!("total {} != {total}", r.total_gt))?;
        let got = [r.precision, r.recall, r.f1, r.fp_pct, r.fn_pct].map(|v| v * 100.0);
        for ((g, w), name) in got.iter().zip(want).zip(names) {
            if (g - w).abs() > 0.005 {
                off.push(format!("tp={tp} {name} {g:.4} vs {w}"));
            }
        }
    }
    check(off.is_empty(), || off.join("; "))?;
    Ok("3 rows within 0.005 pp".into())
}

fn throughput() -> Outcome {
    let stages: Vec<(String, f64)> = [
        ("first frame labeling", 120.0),
        ("propagation", 400.0),
        ("segmentation", 300.0),
        ("training", 360.0),
        ("inference", 600.0),
    ]
    .iter()
    .map(|&(n, s)| (n.to_string(), s))
    .collect();
    let r = throughput_report(&stages, 18000);
    check(r.total_seconds == 1780.0, || format!("total {}", r.total_seconds))?;
    check((10.0..=10.2).contains(&r.fps), || format!("fps {}", r.fps))?;
    Ok(format!("1780 s, {:.3} FPS", r.fps))
}

// ------------------------------------------------------------------ matching

/// Box on a 1/32 grid; all corner arithmetic is exact.
#[derive(Clone, Copy)]
struct GridBox {
    class: u32,
    x0: i64,
    y0: i64,
    x1: i64,
    y1: i64,
}

impl GridBox {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let span = |rng: &mut ChaCha8Rng| {
            let a = rng.random_range(0..31);
            (a, rng.random_range(a + 1..=32.min(a + 12)))
        };
        let (x0, x1) = span(rng);
        let (y0, y1) = span(rng);
        Self {
            class: rng.random_range(0..2),
            x0,
            y0,
            x1,
            y1,
        }
    }

    fn norm(&self) -> NormBox {
        let u = |v: i64| v as f64 / 32.0;
        NormBox::new(
            self.class,
            u(self.x0 + self.x1) / 2.0,
            u(self.y0 + self.y1) / 2.0,
            u(self.x1 - self.x0),
            u(self.y1 - self.y0),
        )
        .unwrap()
    }

    /// IoU as (intersection, union) in grid cells.
    fn iou(&self, o: &GridBox) -> (i64, i64) {
        let iw = (self.x1.min(o.x1) - self.x0.max(o.x0)).max(0);
        let ih = (self.y1.min(o.y1) - self.y0.max(o.y0)).max(0);
        let inter = iw * ih;
        let area = |b: &GridBox| (b.x1 - b.x0) * (b.y1 - b.y0);
        (inter, area(self) + area(o) - inter)
    }
}

/// a > b for non-negative fractions.
fn frac_gt(a: (i64, i64), b: (i64, i64)) -> bool {
    a.0 * b.1 > b.0 * a.1
}

/// Greedy matching written out directly on exact fractions.
fn greedy_oracle(gt: &[GridBox], dets: &[(GridBox, f64)], thr: (i64, i64), floor: f64) -> Vec<Option<Option<usize>>> {
    let ious: Vec<Vec<Option<(i64, i64)>>> = dets
        .iter()
        .map(|(d, _)| gt.iter().map(|g| (g.class == d.class).then(|| d.iou(g))).collect())
        .collect();
    let best: Vec<(i64, i64)> = ious
        .iter()
        .map(|row| {
            row.iter()
                .flatten()
                .copied()
                .fold((0, 1), |acc, v| if frac_gt(v, acc) { v } else { acc })
        })
        .collect();
    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].1 >= floor).collect();
    // Selection sort by the documented priority, to stay independent of the
    // library's comparator.
    let mut sorted = Vec::new();
    while !order.is_empty() {
        let mut k = 0;
        for c in 1..order.len() {
            let (a, b) = (order[c], order[k]);
            let better = dets[a].1 > dets[b].1
                || (dets[a].1 == dets[b].1 && (frac_gt(best[a], best[b]) || (!frac_gt(best[b], best[a]) && a < b)));
            if better {
                k = c;
            }
        }
        sorted.push(order.remove(k));
    }
    let mut taken = vec![false; gt.len()];
    let mut out = vec![None; dets.len()];
    for i in sorted {
        let mut pick: Option<usize> = None;
        for j in 0..gt.len() {
            let Some(v) = ious[i][j] else { continue };
            if taken[j] || frac_gt(thr, v) {
                continue;
            }
            if pick.is_none_or(|p| frac_gt(v, ious[i][p].unwrap())) {
                pick = Some(j);
            }
        }
        if let Some(j) = pick {
            taken[j] = true;
        }
        out[i] = Some(pick);
    }
    out
}

/// 101-point AP by direct integration over the PR curve, with recall levels
/// compared as exact fractions.
fn ap_oracle(ranked: &[(f64, bool)], n_gt: usize) -> f64 {
    let mut idx: Vec<usize> = (0..ranked.len()).collect();
    idx.sort_by(|&a, &b| ranked[b].0.partial_cmp(&ranked[a].0).unwrap().then(a.cmp(&b)));
    let mut curve = Vec::new(); // (tp, precision)
    let mut tp = 0;
    for (k, &i) in idx.iter().enumerate() {
        tp += usize::from(ranked[i].1);
        curve.push((tp, tp as f64 / (k + 1) as f64));
    }
    let mut sum = 0.0;
    for level in 0..=100usize {
        // max precision over points with tp / n_gt >= level / 100
        let p = curve
            .iter()
            .filter(|(tp, _)| tp * 100 >= level * n_gt)
            .map(|c| c.1)
            .fold(0.0, f64::max);
        sum += p;
    }
    sum / 101.0
}

fn matching_and_ap() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = MatchConfig::default();
    let mut matched = 0;
    for inst in 0..200 {
        let gt: Vec<GridBox> = (0..rng.random_range(0..=6)).map(|_| GridBox::random(&mut rng)).collect();
        let mut dets: Vec<(GridBox, f64)> = Vec::new();
        for _ in 0..rng.random_range(0..=6) {
            // Mostly perturbed copies of ground truth so matches happen.
            let b = match gt.get(rng.random_range(0..gt.len().max(1) + 1)) {
                Some(g) if rng.random_bool(0.7) => {
                    let mut b = *g;
                    b.x1 = (b.x1 + rng.random_range(0..3)).min(32);
                    b.y0 = (b.y0 - rng.random_range(0..3)).max(0);
                    b
                }
                _ => GridBox::random(&mut rng),
            };
            // Coarse confidences force ties.
            dets.push((b, f64::from(rng.random_range(0..6u8)) / 5.0));
        }
        let nd: Vec<Detection> = dets
            .iter()
            .map(|(b, c)| Detection {
                frame_index: 0,
                norm_box: b.norm(),
                confidence: *c,
            })
            .collect();
        let ng: Vec<NormBox> = gt.iter().map(GridBox::norm).collect();
        let m = match_frame(&ng, &nd, &cfg);
        let want = greedy_oracle(&gt, &dets, (1, 2), cfg.confidence_floor);
        for (i, w) in want.iter().enumerate() {
            let got_gt = m.pairs.iter().find(|p| p.0 == i).map(|p| p.1);
            let got = m.outcome[i].map(|_| got_gt);
            check(got == *w, || format!("instance {inst}, det {i}: {got:?} vs {w:?}"))?;
        }
        check(m.tp + m.fn_ == gt.len(), || format!("instance {inst}: tp+fn"))?;
        matched += m.tp;

        if !gt.is_empty() {
            let ranked: Vec<(f64, bool)> = m
                .outcome
                .iter()
                .zip(&dets)
                .filter_map(|(o, d)| o.map(|t| (d.1, t)))
                .collect();
            let got = average_precision(&ranked, gt.len()).unwrap();
            let want = ap_oracle(&ranked, gt.len());
            check(got == want, || format!("instance {inst}: AP {got} vs {want}"))?;
        }
    }
    Ok(format!("200 instances exact, {matched} matches"))
}

// ------------------------------------------------------------------ geometry

fn geometry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for k in 0..1000 {
        let (w, h) = (rng.random_range(1..48u32), rng.random_range(1..48u32));
        let g = ImageGeometry::new(w, h).unwrap();
        let density = rng.random_range(0.0..0.6);
        let mask = if k % 2 == 0 {
            MaskGrid::from_fn(g, |_, _| rng.random_bool(density))
        } else {
            // One filled ellipse: a single component, so the traced ring
            // must yield the same box as the scan.
            let (cx, cy) = (rng.random_range(0.0..f64::from(w)), rng.random_range(0.0..f64::from(h)));
            let (rx, ry) = (rng.random_range(0.5..12.0), rng.random_range(0.5..12.0));
            MaskGrid::from_fn(g, |x, y| {
                let dx = (f64::from(x) + 0.5 - cx) / rx;
                let dy = (f64::from(y) + 0.5 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            })
        };
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        let mut any = false;
        for y in 0..h {
            for x in 0..w {
                if mask.get(i64::from(x), i64::from(y)) {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        let scan = any.then(|| PixelBox {
            x_min: f64::from(x0),
            y_min: f64::from(y0),
            x_max: f64::from(x1),
            y_max: f64::from(y1),
        });
        let got = min_bounding_box(mask.iter_set());
        check(got == scan, || format!("mask {k}: {got:?} vs {scan:?}"))?;
        if k % 2 == 1 {
            let ring = extract_contour(&mask).and_then(min_bounding_box);
            check(ring == scan, || format!("ellipse {k}: ring box {ring:?} vs {scan:?}"))?;
        }
    }

    let mut worst = 0.0f64;
    for k in 0..1000 {
        // Corners in thousandths of a pixel: the exact IoU is a ratio of
        // integers.
        let mut corner = || {
            let a: i64 = rng.random_range(0..200_000);
            (a, a + rng.random_range(0..120_000))
        };
        let (ax, bx) = (corner(), corner());
        let (ay, by) = (corner(), corner());
        let pb = |x: (i64, i64), y: (i64, i64)| {
            PixelBox::new(x.0 as f64 / 1000.0, y.0 as f64 / 1000.0, x.1 as f64 / 1000.0, y.1 as f64 / 1000.0)
                .unwrap()
        };
        let (a, b) = (pb(ax, ay), pb(bx, by));
        let iw = (ax.1.min(bx.1) - ax.0.max(bx.0)).max(0) as i128;
        let ih = (ay.1.min(by.1) - ay.0.max(by.0)).max(0) as i128;
        let inter = iw * ih;
        let area = |x: (i64, i64), y: (i64, i64)| (x.1 - x.0) as i128 * (y.1 - y.0) as i128;
        let union = area(ax, ay) + area(bx, by) - inter;
        let exact = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
        let err = (iou(&a, &b) - exact).abs();
        worst = worst.max(err);
        check(err <= 1e-12, || format!("pair {k}: {} vs {exact}", iou(&a, &b)))?;
    }
    Ok(format!("1000 masks exact, 1000 IoU pairs, max error {worst:.1e}"))
}

// -------------------------------------------------------------- end to end

struct Synthetic {
    _dir: tempfile::TempDir,
    store: ProjectStore,
    config: PipelineConfig,
    backends: Backends,
}

fn synthetic_project() -> Result<Synthetic, String> {
    let params = SceneParams {
        frame_count: 60,
        drifting: 12,
        exiting: 3,
        ..SceneParams::default()
    };
    let scene = SyntheticScene::generate(&params)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = ProjectStore::open(dir.path().join("projects")).map_err(|e| e.to_string())?;
    let mut project = store
        .create_project("synthetic", scene.geometry, scene.frame_count, vec!["object".into()])
        .map_err(|e| e.to_string())?;
    scene
        .write_frames(&store.project_dir("synthetic").join(FRAMES_DIR))
        .map_err(|e| e.to_string())?;
    for mode in [SelectionMode::VariableBox, SelectionMode::FixedBox] {
        project
            .add_seed(scene.seed_annotation(0, mode)?, 30)
            .map_err(|e| e.to_string())?;
    }
    store.save(&project).map_err(|e| e.to_string())?;
    let scene_path = dir.path().join("scene.json");
    fs::write(&scene_path, serde_json::to_string(&scene).unwrap()).map_err(|e| e.to_string())?;
    let gt_path = dir.path().join("gt.csv");
    fs::write(&gt_path, scene.to_mot_csv()).map_err(|e| e.to_string())?;
    let mut config = PipelineConfig::oracle(&scene_path);
    config.mode = SelectionMode::VariableBox;
    config.ground_truth = Some(GroundTruthSource {
        path: gt_path,
        format: GroundTruthFormat::MotCsv,
    });
    let backends = Backends::from_config(&config.backends).map_err(|e| e.to_string())?;
    Ok(Synthetic {
        _dir: dir,
        store,
        config,
        backends,
    })
}

fn end_to_end(s: &Synthetic) -> Outcome {
    let report = |filter: bool| -> Result<EvalReport, String> {
        let mut cfg = s.config.clone();
        cfg.filter.enabled = filter;
        let out = run_pipeline(&s.store, "synthetic", &cfg, &s.backends, RunOptions::default())
            .map_err(|e| e.to_string())?;
        Ok(out.summary.ok_or("no summary")?.report)
    };
    let on = report(true)?;
    let off = report(false)?;
    check(on.recall >= 0.95, || format!("recall {:.4} with filter", on.recall))?;
    check(on.fp <= off.fp, || format!("FP {} with filter > {} without", on.fp, off.fp))?;
    Ok(format!(
        "recall {:.4}, FP {} with filter vs {} without",
        on.recall, on.fp, off.fp
    ))
}

fn sweep_shape(s: &Synthetic) -> Outcome {
    let rows = ablation_sweep(&s.store, "synthetic", &s.config, &s.backends).map_err(|e| e.to_string())?;
    let want = [
        "Fixed Box Selection / No SAM / No Positional Filter",
        "Fixed Box Selection / No SAM / Positional Filter",
        "Variable Box Selection / No SAM / No Positional Filter",
        "Variable Box Selection / No SAM / Positional Filter",
        "Fixed Box Selection / SAM / No Positional Filter",
        "Fixed Box Selection / SAM / Positional Filter",
        "Variable Box Selection / SAM / No Positional Filter",
        "Variable Box Selection / SAM / Positional Filter",
    ];
    let got: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    check(got == want, || format!("rows {got:?}"))?;
    for filter in [false, true] {
        let find = |sam: bool| {
            rows.iter()
                .find(|r| r.tag.mode == SelectionMode::FixedBox && r.tag.sam == sam && r.tag.filter == filter)
                .unwrap()
        };
        let (with, without) = (find(true), find(false));
        check(with.report.recall >= without.report.recall, || {
            format!(
                "filter={filter}: fixed+resize recall {:.4} < fixed {:.4}",
                with.report.recall, without.report.recall
            )
        })?;
    }
    let fixed = rows[0].report.recall;
    let resized = rows[4].report.recall;
    Ok(format!("8 rows; fixed recall {fixed:.4} -> {resized:.4} with resizing"))
}

// ------------------------------------------------------------------- formats

fn formats() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let img = dir.path().join("frame.png");
    fs::write(&img, b"not decoded").map_err(|e| e.to_string())?;
    let image_of = |_| img.clone();
    let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let spec = DatasetSpec {
        variant: DatasetVariant::Detect,
        pairs: vec![0],
        train_fraction: 1.0,
        tag: AblationTag {
            mode: SelectionMode::VariableBox,
            sam: true,
            filter: true,
        },
    };
    let random_box = |rng: &mut ChaCha8Rng| {
        // Six-decimal values survive the text form exactly.
        let q = |v: f64| (v * 1e6).round() / 1e6;
        let w = q(rng.random_range(0.001..0.4));
        let h = q(rng.random_range(0.001..0.4));
        let cx = q(rng.random_range(w / 2.0 + 1e-6..1.0 - w / 2.0 - 1e-6));
        let cy = q(rng.random_range(h / 2.0 + 1e-6..1.0 - h / 2.0 - 1e-6));
        NormBox::new(rng.random_range(0..3), cx, cy, w, h).unwrap()
    };
    for k in 0..1000 {
        let frames = rng.random_range(1..4u32);
        let labels: Vec<FrameLabels> = (0..frames)
            .map(|f| FrameLabels {
                boxes: (0..rng.random_range(0..6)).map(|_| random_box(&mut rng)).collect(),
                ..FrameLabels::empty(f * 3, Provenance::Propagated)
            })
            .collect();
        let dest = dir.path().join(format!("ds{k}"));
        emit_dataset(&dest, &labels, &names, &image_of, &spec).map_err(|e| e.to_string())?;
        let back = read_dataset(&dest).map_err(|e| e.to_string())?;
        let strip = |l: &FrameLabels| (l.frame_index, l.boxes.clone());
        let got: Vec<_> = back.labels.iter().map(strip).collect();
        let want: Vec<_> = labels.iter().map(strip).collect();
        check(got == want, || format!("dataset {k} differs after read"))?;
        fs::remove_dir_all(&dest).map_err(|e| e.to_string())?;
    }

    for k in 0..1000 {
        let b = random_box(&mut rng);
        let line = format_box_line(&b);
        let again = format_box_line(&parse_box_line(&line)?);
        check(again == line, || format!("line {k}: {line:?} -> {again:?}"))?;
    }

    let mot = "\
1,1,100,100,50,40,1,1,1
1,2,0,0,1000,1000,1,1,1
2,1,500,250,100,100,0.9,1,1
2,2,10,20,30,40,1,2,0.5
3,1,900,900,100,100,1,1,1
3,5,250,750,500,200,1,1,1
5,1,1,1,2,2,1,1,1
5,2,333,333,334,334,1,1,1
7,9,600,0,400,50,1,1,1
7,3,0,950,200,50,1,1,1
";
    let want: [(u32, [f64; 4]); 10] = [
        (0, [0.125, 0.12, 0.05, 0.04]),
        (0, [0.5, 0.5, 1.0, 1.0]),
        (1, [0.55, 0.3, 0.1, 0.1]),
        (1, [0.025, 0.04, 0.03, 0.04]),
        (2, [0.95, 0.95, 0.1, 0.1]),
        (2, [0.5, 0.85, 0.5, 0.2]),
        (4, [0.002, 0.002, 0.002, 0.002]),
        (4, [0.5, 0.5, 0.334, 0.334]),
        (6, [0.8, 0.025, 0.4, 0.05]),
        (6, [0.1, 0.975, 0.2, 0.05]),
    ];
    let gt = mot_to_ground_truth(mot, ImageGeometry::new(1000, 1000).unwrap()).map_err(|e| e.to_string())?;
    let got: Vec<(u32, [f64; 4])> = gt
        .values()
        .flat_map(|l| l.boxes.iter().map(move |b| (l.frame_index, [b.cx, b.cy, b.w, b.h])))
        .collect();
    check(got == want, || format!("MOT boxes {got:?}"))?;
    Ok("1000 datasets, 1000 lines, 10 MOT rows".into())
}

// ---------------------------------------------------------------- accounting

fn seed_count() -> Outcome {
    let params = SceneParams {
        frame_count: 30,
        drifting: 40,
        exiting: 0,
        min_size_px: 16.0,
        max_size_px: 28.0,
        ..SceneParams::default()
    };
    let scene = std::sync::Arc::new(SyntheticScene::generate(&params)?);
    let seed = scene.seed_annotation(0, SelectionMode::VariableBox)?;
    check(seed.entries.len() == 40, || format!("{} seed entries", seed.entries.len()))?;
    let _: &[SeedEntry] = &seed.entries;
    let req = TrackerRequest {
        job_id: "count".into(),
        frames: window_refs(0, 30, |i| Path::new("frames").join(format!("{i:06}.png"))),
        seed,
        geometry: scene.geometry,
        chunk_length: 8,
    };
    let set = propagate_pair(&req, &OracleTracker::new(scene), &FilterConfig::default()).map_err(|e| e.to_string())?;
    let n = set.labeled_instances();
    check(n == 1200, || format!("{n} labeled instances"))?;
    Ok("40 seeds x 30 frames = 1200".into())
}

/// Criteria that cannot pass as pinned, with the reason. They still run and
/// print FAIL; the process fails if one of them starts passing, so the list
/// cannot go stale silently.
const KNOWN_RED: &[(&str, &str)] = &[(
    "table-row arithmetic",
    "the published AnimalTrack F1 is not the harmonic mean of its own precision and recall",
)];

fn main() -> ExitCode {
    let mut failed = 0;
    let mut unexpected = 0;
    let mut report = |name: &str, limit: Duration, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let mut res = f();
        let took = t.elapsed();
        if res.is_ok() && took > limit {
            res = Err(format!("took {took:.2?}, limit {limit:?}"));
        }
        let known = KNOWN_RED.iter().find(|k| k.0 == name).map(|k| k.1);
        match res {
            Ok(msg) => {
                println!("PASS  {name}: {msg} ({took:.2?})");
                if known.is_some() {
                    unexpected += 1;
                    println!("      listed as known red but passed; update KNOWN_RED");
                }
            }
            Err(msg) => {
                failed += 1;
                println!("FAIL  {name}: {msg} ({took:.2?})");
                match known {
                    Some(why) => println!("      known red: {why}"),
                    None => unexpected += 1,
                }
            }
        }
    };
    let secs = Duration::from_secs;
    report("table-row arithmetic", secs(1), &mut table_rows);
    report("throughput", secs(1), &mut throughput);
    report("matching and AP oracles", secs(10), &mut matching_and_ap);
    report("geometry oracles", secs(30), &mut geometry);
    match synthetic_project() {
        Ok(s) => {
            report("end-to-end synthetic run", secs(60), &mut || end_to_end(&s));
            report("ablation sweep shape", secs(120), &mut || sweep_shape(&s));
        }
        Err(e) => {
            report("end-to-end synthetic run", secs(60), &mut || Err(e.clone()));
            report("ablation sweep shape", secs(120), &mut || Err(e.clone()));
        }
    }
    report("format round trips", secs(60), &mut formats);
    report("seed-count accounting", secs(5), &mut seed_count);
    println!("acceptance: {} of 8 criteria pass, {failed} fail ({unexpected} unexpected)", 8 - failed);
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
