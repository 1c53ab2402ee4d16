use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fedkit::ensemble::{ensemble, nms};
use fedkit::eval::{evaluate, EvalMode};
use fedkit::io::serialized_size;
use fedkit::postprocess::trim_to_budget;
use fedkit::{GroundTruthInstance, Hierarchy, Verification, VerificationTable};
use fedkit_bench::{random_mask, random_predictions};

fn bench_nms(c: &mut Criterion) {
    let mut group = c.benchmark_group("nms");
    for n in [1_000, 10_000] {
        let preds = random_predictions(n, 20, 5, 1);
        group.bench_with_input(BenchmarkId::from_parameter(n), &preds, |b, p| {
            b.iter(|| nms(black_box(p), 0.5))
        });
    }
    group.finish();
}

fn bench_ensemble(c: &mut Criterion) {
    let sets: Vec<_> = (0..4)
        .map(|s| random_predictions(5_000, 50, 10, s))
        .collect();
    c.bench_function("ensemble/4x5000", |b| {
        b.iter(|| ensemble(black_box(&sets), 0.5).unwrap())
    });
}

fn bench_trim(c: &mut Criterion) {
    let preds = random_predictions(100_000, 1_000, 50, 2);
    let budget = serialized_size(&preds) / 2;
    c.bench_function("trim/100000", |b| {
        b.iter(|| trim_to_budget(black_box(&preds), budget).unwrap())
    });
}

fn bench_eval(c: &mut Criterion) {
    let preds = random_predictions(20_000, 200, 20, 3);
    let gts: Vec<GroundTruthInstance> = random_predictions(2_000, 200, 20, 4)
        .into_iter()
        .map(|p| GroundTruthInstance::new(&p.image_id, &p.category_id, p.bbox, None).unwrap())
        .collect();
    let mut v = VerificationTable::new();
    for g in &gts {
        v.insert(&g.image_id, &g.category_id, Verification::Positive)
            .unwrap();
    }
    let h = Hierarchy::default();
    c.bench_function("eval/20000", |b| {
        b.iter(|| evaluate(black_box(&preds), &gts, &v, &h, 0.5, EvalMode::Box).unwrap())
    });
}

fn bench_rle(c: &mut Criterion) {
    let mask = random_mask(512, 512, 5);
    let bits = mask.decode();
    let mut group = c.benchmark_group("rle/512x512");
    group.bench_function("decode", |b| b.iter(|| black_box(&mask).decode()));
    group.bench_function("encode", |b| {
        b.iter(|| fedkit::BinaryMask::encode(512, 512, black_box(&bits)).unwrap())
    });
    group.bench_function("iou", |b| b.iter(|| black_box(&mask).iou(&mask).unwrap()));
    group.finish();
}

criterion_group!(
    benches,
    bench_nms,
    bench_ensemble,
    bench_trim,
    bench_eval,
    bench_rle
);
criterion_main!(benches);
