//! Product quantization: per-subspace k-means codebooks, encoding, and
//! asymmetric-distance inner-product search.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{top_k, EmbeddingIndex, Hit};
use crate::error::{Error, Result};
use crate::numeric::dot_f32;

pub const DEFAULT_KMEANS_ITERATIONS: usize = 20;
pub const MAX_CENTROIDS: usize = 1 << 16;

/// `m` codebooks of `kc` centroids, each of dimension `dim / m`.
/// Layout of `codebooks`: `[subspace][centroid][component]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PqCodec {
    dim: usize,
    m: usize,
    kc: usize,
    codebooks: Vec<f32>,
}

impl PqCodec {
    pub fn new(dim: usize, m: usize, kc: usize, codebooks: Vec<f32>) -> Result<Self> {
        check_shape(dim, m, kc)?;
        if codebooks.len() != dim * kc {
            return Err(Error::DimensionMismatch {
                expected: dim * kc,
                found: codebooks.len(),
            });
        }
        if codebooks.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook"));
        }
        Ok(PqCodec {
            dim,
            m,
            kc,
            codebooks,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn kc(&self) -> usize {
        self.kc
    }

    pub fn sub_dim(&self) -> usize {
        self.dim / self.m
    }

    pub fn codebooks(&self) -> &[f32] {
        &self.codebooks
    }

    pub fn centroid(&self, subspace: usize, c: usize) -> &[f32] {
        let s = self.sub_dim();
        let start = (subspace * self.kc + c) * s;
        &self.codebooks[start..start + s]
    }

    /// Nearest centroid (squared Euclidean) per subspace; ties go to the
    /// lowest centroid index.
    pub fn encode(&self, v: &[f32]) -> Vec<u16> {
        let s = self.sub_dim();
        (0..self.m)
            .map(|sub| {
                let x = &v[sub * s..(sub + 1) * s];
                let mut best = (f32::INFINITY, 0usize);
                for c in 0..self.kc {
                    let d = sq_dist(x, self.centroid(sub, c));
                    if d < best.0 {
                        best = (d, c);
                    }
                }
                best.1 as u16
            })
            .collect()
    }

    pub fn decode(&self, codes: &[u16]) -> Vec<f32> {
        codes
            .iter()
            .enumerate()
            .flat_map(|(sub, &c)| self.centroid(sub, c as usize).iter().copied())
            .collect()
    }

    /// Per-subspace inner products of the query with every centroid.
    fn lookup_table(&self, q: &[f32]) -> Vec<f32> {
        let s = self.sub_dim();
        let mut table = Vec::with_capacity(self.m * self.kc);
        for sub in 0..self.m {
            let qs = &q[sub * s..(sub + 1) * s];
            for c in 0..self.kc {
                table.push(dot_f32(qs, self.centroid(sub, c)));
            }
        }
        table
    }
}

fn check_shape(dim: usize, m: usize, kc: usize) -> Result<()> {
    if m == 0 || !dim.is_multiple_of(m) {
        return Err(Error::config(
            "m",
            format!("must divide the dimension {dim}"),
        ));
    }
    if kc == 0 || kc > MAX_CENTROIDS {
        return Err(Error::config(
            "kc",
            format!("must lie in [1, {MAX_CENTROIDS}]"),
        ));
    }
    Ok(())
}

fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

fn sq_dist_f64(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - y;
            d * d
        })
        .sum()
}

#[derive(Debug, Clone)]
pub struct PqTraining {
    pub codec: PqCodec,
    /// Total squared quantization error after each Lloyd iteration.
    pub objective: Vec<f64>,
}

/// Trains one k-means codebook per subspace. Seeding is k-means++ (squared
/// distance sampling) from a generator seeded per subspace; empty clusters
/// keep their previous centroid, so the objective never increases.
pub fn train_pq(
    index: &EmbeddingIndex,
    m: usize,
    kc: usize,
    iterations: usize,
    seed: u64,
) -> Result<PqTraining> {
    check_shape(index.dim(), m, kc)?;
    let n = index.len();
    if kc > n {
        return Err(Error::InsufficientData(format!(
            "{kc} centroids requested from {n} vectors"
        )));
    }
    let dim = index.dim();
    let sub = dim / m;
    let per_subspace: Vec<(Vec<f64>, Vec<f64>)> = (0..m)
        .into_par_iter()
        .map(|s| {
            let points: Vec<&[f32]> = (0..n)
                .map(|i| &index.vector(i)[s * sub..(s + 1) * sub])
                .collect();
            kmeans(&points, sub, kc, iterations, seed.wrapping_add(s as u64))
        })
        .collect();

    let mut codebooks = Vec::with_capacity(dim * kc);
    let mut objective = vec![0.0; iterations];
    for (centroids, trace) in &per_subspace {
        codebooks.extend(centroids.iter().map(|c| *c as f32));
        for (o, t) in objective.iter_mut().zip(trace) {
            *o += t;
        }
    }
    Ok(PqTraining {
        codec: PqCodec::new(dim, m, kc, codebooks)?,
        objective,
    })
}

fn assign(points: &[&[f32]], centroids: &[f64], dim: usize, labels: &mut [usize]) -> f64 {
    let kc = centroids.len() / dim;
    let mut total = 0.0;
    for (p, label) in points.iter().zip(labels.iter_mut()) {
        let mut best = (f64::INFINITY, 0usize);
        for c in 0..kc {
            let d = sq_dist_f64(p, &centroids[c * dim..(c + 1) * dim]);
            if d < best.0 {
                best = (d, c);
            }
        }
        *label = best.1;
        total += best.0;
    }
    total
}

fn kmeans(
    points: &[&[f32]],
    dim: usize,
    kc: usize,
    iterations: usize,
    seed: u64,
) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = points.len();
    let to_f64 = |p: &[f32]| p.iter().map(|x| f64::from(*x)).collect::<Vec<_>>();

    let mut centroids = Vec::with_capacity(kc * dim);
    centroids.extend(to_f64(points[rng.random_range(0..n)]));
    let mut nearest: Vec<f64> = points
        .iter()
        .map(|p| sq_dist_f64(p, &centroids[..dim]))
        .collect();
    while centroids.len() < kc * dim {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in nearest.iter().enumerate() {
                if *d > 0.0 && target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            // rounding can walk past the last positive weight
            if nearest[chosen] == 0.0 {
                chosen = nearest.iter().rposition(|d| *d > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = to_f64(points[pick]);
        for (p, best) in points.iter().zip(nearest.iter_mut()) {
            *best = best.min(sq_dist_f64(p, &c));
        }
        centroids.extend(c);
    }

    let mut labels = vec![0usize; n];
    assign(points, &centroids, dim, &mut labels);
    let mut trace = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let mut sums = vec![0.0; kc * dim];
        let mut counts = vec![0usize; kc];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l * dim..(l + 1) * dim].iter_mut().zip(p.iter()) {
                *s += f64::from(*x);
            }
        }
        for c in 0..kc {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
        trace.push(assign(points, &centroids, dim, &mut labels));
    }
    (centroids, trace)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PqIndex {
    codec: PqCodec,
    ids: Vec<String>,
    codes: Vec<u16>,
    version: u64,
    dump_date: Option<NaiveDate>,
}

impl PqIndex {
    pub(crate) fn from_raw_parts(
        codec: PqCodec,
        ids: Vec<String>,
        codes: Vec<u16>,
        version: u64,
        dump_date: Option<NaiveDate>,
    ) -> Result<Self> {
        if codes.len() != ids.len() * codec.m {
            return Err(Error::DimensionMismatch {
                expected: ids.len() * codec.m,
                found: codes.len(),
            });
        }
        if codes.iter().any(|c| *c as usize >= codec.kc) {
            return Err(Error::Format("code index out of range".into()));
        }
        Ok(PqIndex {
            codec,
            ids,
            codes,
            version,
            dump_date,
        })
    }

    pub fn codec(&self) -> &PqCodec {
        &self.codec
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn codes(&self, i: usize) -> &[u16] {
        &self.codes[i * self.codec.m..(i + 1) * self.codec.m]
    }

    pub fn all_codes(&self) -> &[u16] {
        &self.codes
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn dim(&self) -> usize {
        self.codec.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dump_date(&self) -> Option<NaiveDate> {
        self.dump_date
    }

    pub fn decode(&self, i: usize) -> Vec<f32> {
        self.codec.decode(self.codes(i))
    }

    /// Code bytes at `ceil(log2 kc)` bits per code plus `f32` codebooks.
    pub fn memory_bytes(&self) -> u64 {
        pq_code_bytes(self.len() as u64, self.codec.m as u64, self.codec.kc as u64)
            + pq_codebook_bytes(self.codec.dim as u64, self.codec.kc as u64, 4)
    }

    pub fn search(&self, q: &[f32], k: usize) -> Result<Vec<Hit>> {
        pq_search(self, q, k)
    }
}

/// Encodes every vector of the index with the codec.
pub fn compress(index: &EmbeddingIndex, codec: &PqCodec) -> Result<PqIndex> {
    if codec.dim != index.dim() {
        return Err(Error::DimensionMismatch {
            expected: index.dim(),
            found: codec.dim,
        });
    }
    let codes: Vec<u16> = (0..index.len())
        .into_par_iter()
        .flat_map_iter(|i| codec.encode(index.vector(i)))
        .collect();
    PqIndex::from_raw_parts(
        codec.clone(),
        index.ids().to_vec(),
        codes,
        index.version(),
        index.dump_date(),
    )
}

/// Approximate search: each entry's score is the sum of table lookups of the
/// query's inner product with its centroids.
pub fn pq_search(index: &PqIndex, q: &[f32], k: usize) -> Result<Vec<Hit>> {
    if k == 0 {
        return Err(Error::config("k", "must be at least 1"));
    }
    if q.len() != index.dim() {
        return Err(Error::DimensionMismatch {
            expected: index.dim(),
            found: q.len(),
        });
    }
    let table = index.codec.lookup_table(q);
    let kc = index.codec.kc;
    let scored: Vec<(f32, usize)> = (0..index.len())
        .into_par_iter()
        .map(|i| {
            let mut acc = 0.0f32;
            for (sub, &c) in index.codes(i).iter().enumerate() {
                acc += table[sub * kc + c as usize];
            }
            (acc, i)
        })
        .collect();
    Ok(top_k(scored, k)
        .into_iter()
        .map(|(score, i)| Hit {
            id: index.ids[i].clone(),
            score,
        })
        .collect())
}

pub fn ceil_log2(x: u64) -> u64 {
    if x <= 1 {
        0
    } else {
        u64::from(64 - (x - 1).leading_zeros())
    }
}

pub fn uncompressed_bytes(n: u64, dim: u64, bytes_per_scalar: u64) -> u64 {
    n * dim * bytes_per_scalar
}

/// `N · m · ceil(log2 kc) / 8`, rounded up to whole bytes.
pub fn pq_code_bytes(n: u64, m: u64, kc: u64) -> u64 {
    (n * m * ceil_log2(kc)).div_ceil(8)
}

pub fn pq_codebook_bytes(dim: u64, kc: u64, bytes_per_scalar: u64) -> u64 {
    dim * kc * bytes_per_scalar
}

/// Compression factor per vector, codebooks excluded.
pub fn per_vector_ratio(dim: u64, bytes_per_scalar: u64, m: u64, kc: u64) -> f64 {
    (dim * bytes_per_scalar * 8) as f64 / (m * ceil_log2(kc)) as f64
}

/// Size after PQ of an index known only by its uncompressed size, codebooks
/// ignored.
pub fn scaled_compressed_bytes(
    uncompressed: f64,
    dim: u64,
    bytes_per_scalar: u64,
    m: u64,
    kc: u64,
) -> f64 {
    uncompressed / per_vector_ratio(dim, bytes_per_scalar, m, kc)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryReport {
    pub uncompressed_bytes: f64,
    pub compressed_bytes: f64,
}

impl MemoryReport {
    pub fn for_pq(
        n: u64,
        dim: u64,
        bytes_per_scalar: u64,
        m: u64,
        kc: u64,
        codebook_scalar_bytes: u64,
    ) -> Self {
        MemoryReport {
            uncompressed_bytes: uncompressed_bytes(n, dim, bytes_per_scalar) as f64,
            compressed_bytes: (pq_code_bytes(n, m, kc)
                + pq_codebook_bytes(dim, kc, codebook_scalar_bytes))
                as f64,
        }
    }

    pub fn ratio(&self) -> f64 {
        self.uncompressed_bytes / self.compressed_bytes
    }
}
