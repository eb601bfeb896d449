use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use momentdiff_bench::{default_model, random_costs, random_sample};
use momentdiff_core::engine::infer_batch;
use momentdiff_core::{denoise_forward, encode_fusion, hungarian_match, NoisySpanSet, Span};

fn matching(c: &mut Criterion) {
    let mut group = c.benchmark_group("hungarian");
    for (rows, cols) in [(1, 5), (3, 5), (6, 6), (10, 30)] {
        let costs = random_costs(rows, cols, 1);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{rows}x{cols}")), &costs, |b, costs| {
            b.iter(|| hungarian_match(black_box(costs)).unwrap())
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let model = default_model(0);
    let (video, query) = random_sample(&model.config, 32, 2);
    c.bench_function("encode_fusion", |b| {
        b.iter(|| encode_fusion(black_box(&video), black_box(&query), &model).unwrap())
    });
    let fusion = encode_fusion(&video, &query, &model).unwrap();
    let noisy = NoisySpanSet {
        spans: (0..5).map(|i| Span::new(0.1 + 0.2 * i as f64, 0.15)).collect(),
        intensity: 500,
    };
    c.bench_function("denoise_forward", |b| {
        b.iter(|| denoise_forward(black_box(&noisy), &fusion, &model).unwrap())
    });
}

fn inference(c: &mut Criterion) {
    let model = default_model(0);
    let samples: Vec<_> = (0..16).map(|i| random_sample(&model.config, 32, 100 + i)).collect();
    let refs: Vec<_> = samples.iter().map(|(v, q)| (v, q)).collect();
    let mut group = c.benchmark_group("infer_16_queries");
    group.sample_size(10);
    for steps in [1, 2, 10, 50] {
        group.bench_with_input(BenchmarkId::from_parameter(steps), &steps, |b, &steps| {
            b.iter(|| infer_batch(&model, black_box(&refs), steps, 0.0, 0, 0).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, matching, forward, inference);
criterion_main!(benches);
