use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use seedprop_core::detector::Detections;
use seedprop_core::eval::{average_precision, evaluate, match_frame};
use seedprop_core::segfit::{encode_rle, extract_contour, min_bounding_box, simplify_ring};
use seedprop_core::*;

fn random_box(rng: &mut StdRng) -> NormBox {
    let w = rng.random_range(0.01..0.2);
    let h = rng.random_range(0.01..0.2);
    NormBox::new(0, rng.random_range(w / 2.0..1.0 - w / 2.0), rng.random_range(h / 2.0..1.0 - h / 2.0), w, h).unwrap()
}

fn jitter(rng: &mut StdRng, b: &NormBox, frame_index: u32) -> Detection {
    let d = |r: &mut StdRng| r.random_range(-0.01..0.01);
    let cx = (b.cx + d(rng)).clamp(0.05, 0.95);
    let cy = (b.cy + d(rng)).clamp(0.05, 0.95);
    let w = (b.w + d(rng)).clamp(0.005, 0.1);
    let h = (b.h + d(rng)).clamp(0.005, 0.1);
    Detection {
        frame_index,
        norm_box: NormBox::new(b.class_id, cx, cy, w, h).unwrap(),
        confidence: rng.random_range(0.2..1.0),
    }
}

fn bench_iou(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(1);
    let pairs: Vec<(PixelBox, PixelBox)> = (0..1000)
        .map(|_| (random_box(&mut rng).unit_corners(), random_box(&mut rng).unit_corners()))
        .collect();
    c.bench_function("iou/1000 pairs", |b| {
        b.iter(|| pairs.iter().map(|(x, y)| iou(black_box(x), black_box(y))).sum::<f64>())
    });
}

fn bench_matching(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(2);
    let mut group = c.benchmark_group("match_frame");
    for n in [10usize, 50, 200] {
        let gt: Vec<NormBox> = (0..n).map(|_| random_box(&mut rng)).collect();
        let mut dets: Vec<Detection> = gt.iter().map(|g| jitter(&mut rng, g, 0)).collect();
        dets.extend((0..n / 5).map(|_| Detection {
            frame_index: 0,
            norm_box: random_box(&mut rng),
            confidence: rng.random_range(0.2..1.0),
        }));
        let cfg = MatchConfig::default();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| match_frame(black_box(&gt), black_box(&dets), &cfg))
        });
    }
    group.finish();

    let ranked: Vec<(f64, bool)> = (0..10_000).map(|_| (rng.random::<f64>(), rng.random_bool(0.7))).collect();
    c.bench_function("average_precision/10k", |b| b.iter(|| average_precision(black_box(&ranked), 8000)));
}

fn bench_evaluate(c: &mut Criterion) {
    let scene = SyntheticScene::generate(&SceneParams {
        frame_count: 60,
        ..SceneParams::default()
    })
    .unwrap();
    let gt = scene.ground_truth();
    let mut rng = StdRng::seed_from_u64(3);
    let dets: Detections = gt
        .iter()
        .map(|(&f, labels)| (f, labels.boxes.iter().map(|b| jitter(&mut rng, b, f)).collect()))
        .collect();
    let cfg = MatchConfig::default();
    c.bench_function("evaluate/60 frames", |b| b.iter(|| evaluate(&gt, black_box(&dets), &cfg).unwrap()));
}

fn blob(size: u32) -> MaskGrid {
    let g = ImageGeometry::new(size, size).unwrap();
    let c = size as f64 / 2.0;
    MaskGrid::from_fn(g, |x, y| {
        let (dx, dy) = (x as f64 - c, y as f64 - c);
        let r = (dx * dx + dy * dy).sqrt();
        let wobble = 0.3 * c * (5.0 * dy.atan2(dx)).sin();
        r < 0.6 * c + wobble
    })
}

fn bench_contour(c: &mut Criterion) {
    let mut group = c.benchmark_group("contour");
    for size in [128u32, 512] {
        let mask = blob(size);
        group.bench_with_input(BenchmarkId::new("extract", size), &mask, |b, m| b.iter(|| extract_contour(black_box(m))));
        let ring = extract_contour(&mask).unwrap();
        group.bench_with_input(BenchmarkId::new("simplify", size), &ring, |b, r| b.iter(|| simplify_ring(black_box(r), 1.5)));
        group.bench_with_input(BenchmarkId::new("min_bbox", size), &ring, |b, r| {
            b.iter(|| min_bounding_box(black_box(r).iter().copied()))
        });
        group.bench_with_input(BenchmarkId::new("rle", size), &mask, |b, m| b.iter(|| encode_rle(black_box(m))));
    }
    group.finish();
}

criterion_group!(benches, bench_iou, bench_matching, bench_evaluate, bench_contour);
criterion_main!(benches);
