//! Seeded inputs shared by the benchmarks.

use ralab::index::{EmbeddingIndex, Precision};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_vectors(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect()
}

pub fn random_index(n: usize, dim: usize, shards: usize, seed: u64) -> EmbeddingIndex {
    let ids = (0..n).map(|i| format!("v{i:06}")).collect();
    EmbeddingIndex::from_vectors(ids, random_vectors(n, dim, seed), Precision::F32, shards)
        .expect("valid shape")
}

pub fn random_scores(k: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k).map(|_| rng.random_range(-5.0..5.0)).collect()
}
