use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use muse::{attend, attend_causal, kmeans, muse_acausal, muse_causal, Rng};
use muse_bench::{config, isotropic, mixture, D};

const BUDGET: usize = 1 << 14;

fn acausal(c: &mut Criterion) {
    let mut group = c.benchmark_group("acausal");
    group.sample_size(10);
    group.throughput(Throughput::Elements(BUDGET as u64));
    let cfg = config();
    for n in [1024, 2048, 4096] {
        let w = isotropic::<f32>(BUDGET / n, n);
        let scale = cfg.scale_for(D) as f32;
        group.bench_with_input(BenchmarkId::new("exact", n), &w, |b, w| {
            b.iter(|| attend(black_box(&w.q), &w.k, &w.v, None, scale).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("muse", n), &w, |b, w| {
            b.iter(|| muse_acausal(black_box(&w.q), &w.k, &w.v, &cfg).unwrap())
        });
    }
    group.finish();
}

fn causal(c: &mut Criterion) {
    let mut group = c.benchmark_group("causal");
    group.sample_size(10);
    let cfg = config();
    let w = mixture::<f32>(4096);
    group.bench_function("exact", |b| {
        b.iter(|| attend_causal(black_box(&w.q), &w.k, &w.v, cfg.scale_for(D) as f32).unwrap())
    });
    for block in [256, 1024] {
        group.bench_with_input(BenchmarkId::new("muse", block), &block, |b, &block| {
            b.iter(|| muse_causal(black_box(&w.q), &w.k, &w.v, &cfg, block).unwrap())
        });
    }
    group.finish();
}

fn clustering(c: &mut Criterion) {
    let mut group = c.benchmark_group("kmeans");
    let w = mixture::<f32>(4096);
    for iters in [1, 5] {
        group.bench_with_input(BenchmarkId::new("c64", iters), &iters, |b, &iters| {
            b.iter(|| kmeans(black_box(w.k.data()), D, 64, iters, 1.5, &mut Rng::new(0)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, acausal, causal, clustering);
criterion_main!(benches);
