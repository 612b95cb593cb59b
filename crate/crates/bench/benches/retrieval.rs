use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kalahash_bench::gallery;
use kalahash_core::retrieval::{map_at_k, silhouette};
use std::hint::black_box;

fn search(c: &mut Criterion) {
    let mut group = c.benchmark_group("search");
    for bits in [16, 32, 64] {
        let (index, q, _) = gallery(10_000, bits, 10, 1, 1);
        group.bench_with_input(BenchmarkId::new("top100", bits), &bits, |b, _| {
            b.iter(|| index.search(black_box(q.code(0)), 100).unwrap())
        });
    }
    group.finish();
}

fn map(c: &mut Criterion) {
    let (index, q, ql) = gallery(5_000, 64, 10, 100, 2);
    c.bench_function("map_at_k/100x5000", |b| {
        b.iter(|| map_at_k(&index, &q, &ql, 1000).unwrap())
    });
}

fn sil(c: &mut Criterion) {
    let (_, q, _) = gallery(1, 64, 1, 500, 3);
    let labels: Vec<usize> = (0..500).map(|i| i % 10).collect();
    c.bench_function("silhouette/500", |b| {
        b.iter(|| silhouette(&q, &labels).unwrap())
    });
}

criterion_group!(benches, search, map, sil);
criterion_main!(benches);
