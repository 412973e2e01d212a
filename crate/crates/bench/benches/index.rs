use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ralab::index::{compress, train_pq};
use ralab_bench::{random_index, random_vectors};

fn exact_search(c: &mut Criterion) {
    let query = &random_vectors(1, 64, 1)[0];
    let mut group = c.benchmark_group("search");
    for shards in [1, 4] {
        let index = random_index(20_000, 64, shards, 0);
        group.bench_with_input(BenchmarkId::new("shards", shards), &index, |b, index| {
            b.iter(|| index.search(black_box(query), 20).unwrap())
        });
    }
    group.finish();
}

fn pq_search(c: &mut Criterion) {
    let index = random_index(20_000, 64, 1, 0);
    let query = &random_vectors(1, 64, 1)[0];
    let mut group = c.benchmark_group("pq_search");
    for kc in [16, 256] {
        let codec = train_pq(&index, 8, kc, 10, 0).unwrap().codec;
        let pq = compress(&index, &codec).unwrap();
        group.bench_with_input(BenchmarkId::new("kc", kc), &pq, |b, pq| {
            b.iter(|| pq.search(black_box(query), 20).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, exact_search, pq_search);
criterion_main!(benches);
