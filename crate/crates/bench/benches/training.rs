use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ralab::losses::{distill_step, emdr2_objective, pdist_target};
use ralab::retriever::{DualEncoder, RetrievalDistribution, Vocab};
use ralab_bench::random_scores;

fn losses(c: &mut Criterion) {
    let mut group = c.benchmark_group("losses");
    for k in [8, 64] {
        let scores = random_scores(k, 0);
        let logliks: Vec<f64> = random_scores(k, 1).iter().map(|x| -x.abs()).collect();
        let retr = RetrievalDistribution::from_scores(scores, 0.1).unwrap();
        let target = pdist_target(&logliks, 1.0).unwrap();
        group.bench_with_input(BenchmarkId::new("pdist", k), &k, |b, _| {
            b.iter(|| distill_step(black_box(&target), black_box(&retr)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("emdr2", k), &k, |b, _| {
            b.iter(|| emdr2_objective(black_box(&logliks), black_box(&retr)).unwrap())
        });
    }
    group.finish();
}

fn encode(c: &mut Criterion) {
    let tokens: Vec<String> = (0..5000).map(|i| format!("w{i}")).collect();
    let encoder = DualEncoder::init(Vocab::build(tokens.iter()), 64, true, 0).unwrap();
    let passage: Vec<String> = (0..200).map(|i| format!("w{}", (i * 37) % 5000)).collect();
    let docs: Vec<Vec<String>> = (0..20)
        .map(|j| passage.iter().skip(j).take(100).cloned().collect())
        .collect();
    let grad = vec![0.05; docs.len()];
    c.bench_function("encode/doc_200_tokens", |b| {
        b.iter(|| encoder.encode_doc(black_box(&passage)).unwrap())
    });
    c.bench_function("encode/backprop_k20", |b| {
        b.iter(|| {
            encoder
                .backprop_scores(
                    black_box(&passage[..10]),
                    &docs,
                    &grad,
                    ralab::retriever::TrainMode::Full,
                )
                .unwrap()
        })
    });
}

criterion_group!(benches, losses, encode);
criterion_main!(benches);
