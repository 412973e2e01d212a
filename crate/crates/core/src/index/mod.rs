//! Versioned document-embedding index with exact sharded search.
//!
//! Entries are kept in ascending passage-id order, so an entry's position is
//! also its tie-break rank. Shards are contiguous balanced slices of that
//! order; search scans every shard in parallel and merges the per-shard top-k.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use chrono::NaiveDate;
use half::f16;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{balanced_partition, Passage};
use crate::error::{Error, Result};
use crate::numeric::dot_f32;
use crate::retriever::DualEncoder;

mod file;
mod pq;

pub use file::{read_index_file, write_index_file, StoredIndex, INDEX_MAGIC};
pub use pq::{
    ceil_log2, compress, per_vector_ratio, pq_code_bytes, pq_codebook_bytes, pq_search,
    scaled_compressed_bytes, train_pq, uncompressed_bytes, MemoryReport, PqCodec, PqIndex,
    PqTraining, DEFAULT_KMEANS_ITERATIONS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Precision {
    #[default]
    #[serde(rename = "float32")]
    F32,
    #[serde(rename = "float16")]
    F16,
}

impl Precision {
    pub fn bytes_per_scalar(self) -> u64 {
        match self {
            Precision::F32 => 4,
            Precision::F16 => 2,
        }
    }

    /// Rounds a value to the nearest representable storage value.
    pub fn store(self, v: f32) -> f32 {
        match self {
            Precision::F32 => v,
            Precision::F16 => f16::from_f32(v).to_f32(),
        }
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float32" | "f32" | "fp32" => Ok(Precision::F32),
            "float16" | "f16" | "fp16" => Ok(Precision::F16),
            other => Err(Error::config(
                "precision",
                format!("unknown precision `{other}`"),
            )),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "float32",
            Precision::F16 => "float16",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub id: String,
    pub score: f32,
}

/// Descending score, then ascending position (which is ascending id).
pub(crate) fn rank_order(a: (f32, usize), b: (f32, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Top `k` of `(score, position)` pairs under [`rank_order`].
pub(crate) fn top_k(mut scored: Vec<(f32, usize)>, k: usize) -> Vec<(f32, usize)> {
    if k == 0 {
        return Vec::new();
    }
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, |a, b| rank_order(*a, *b));
        scored.truncate(k);
    }
    scored.sort_unstable_by(|a, b| rank_order(*a, *b));
    scored
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOptions {
    pub shards: usize,
    pub precision: Precision,
    /// Overrides the dump date otherwise inferred from the passages.
    pub dump_date: Option<NaiveDate>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            shards: 1,
            precision: Precision::F32,
            dump_date: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    version: u64,
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<f32>,
    precision: Precision,
    shards: usize,
    dump_date: Option<NaiveDate>,
}

impl EmbeddingIndex {
    /// Embeds every passage with the document tower. The result is version 1.
    pub fn build(passages: &[Passage], encoder: &DualEncoder, opts: &BuildOptions) -> Result<Self> {
        Self::build_versioned(passages, encoder, opts, 1)
    }

    /// Re-embeds the passages with the current encoder under the next version
    /// number, keeping this index's shard count and precision.
    pub fn rebuild(&self, passages: &[Passage], encoder: &DualEncoder) -> Result<Self> {
        let opts = BuildOptions {
            shards: self.shards,
            precision: self.precision,
            dump_date: self.dump_date,
        };
        Self::build_versioned(passages, encoder, &opts, self.version + 1)
    }

    fn build_versioned(
        passages: &[Passage],
        encoder: &DualEncoder,
        opts: &BuildOptions,
        version: u64,
    ) -> Result<Self> {
        if passages.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut order: Vec<&Passage> = passages.iter().collect();
        order.sort_by(|a, b| a.id.cmp(&b.id));
        let embedded = order
            .par_iter()
            .map(|p| encoder.encode_doc(&p.text))
            .collect::<Result<Vec<_>>>()?;
        let ids: Vec<String> = order.iter().map(|p| p.id.clone()).collect();
        let vectors = embedded
            .into_iter()
            .map(|v| v.into_iter().map(|x| x as f32).collect())
            .collect();
        let dump_date = opts.dump_date.or_else(|| {
            let first = order[0].dump_date;
            order
                .iter()
                .all(|p| p.dump_date == first)
                .then_some(first)
                .flatten()
        });
        let mut index = Self::from_vectors(ids, vectors, opts.precision, opts.shards)?;
        index.version = version;
        index.dump_date = dump_date;
        Ok(index)
    }

    /// Assembles an index from raw vectors; entries are sorted by id.
    pub fn from_vectors(
        ids: Vec<String>,
        vectors: Vec<Vec<f32>>,
        precision: Precision,
        shards: usize,
    ) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptyInput);
        }
        if ids.len() != vectors.len() {
            return Err(Error::DimensionMismatch {
                expected: ids.len(),
                found: vectors.len(),
            });
        }
        if shards == 0 {
            return Err(Error::config("shards", "must be at least 1"));
        }
        let dim = vectors[0].len();
        if dim == 0 {
            return Err(Error::config("dim", "must be at least 1"));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for (id, v) in ids.iter().zip(&vectors) {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("index vector"));
            }
        }
        let mut entries: Vec<(String, Vec<f32>)> = ids.into_iter().zip(vectors).collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let mut flat = Vec::with_capacity(entries.len() * dim);
        let mut sorted_ids = Vec::with_capacity(entries.len());
        for (id, v) in entries {
            sorted_ids.push(id);
            flat.extend(v.into_iter().map(|x| precision.store(x)));
        }
        Ok(EmbeddingIndex {
            version: 1,
            dim,
            ids: sorted_ids,
            vectors: flat,
            precision,
            shards,
            dump_date: None,
        })
    }

    pub(crate) fn from_raw_parts(
        version: u64,
        dim: usize,
        ids: Vec<String>,
        vectors: Vec<f32>,
        precision: Precision,
        shards: usize,
        dump_date: Option<NaiveDate>,
    ) -> Self {
        EmbeddingIndex {
            version,
            dim,
            ids,
            vectors,
            precision,
            shards,
            dump_date,
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn shards(&self) -> usize {
        self.shards
    }

    pub fn dump_date(&self) -> Option<NaiveDate> {
        self.dump_date
    }

    pub fn set_dump_date(&mut self, date: Option<NaiveDate>) {
        self.dump_date = date;
    }

    pub fn with_shards(mut self, shards: usize) -> Result<Self> {
        if shards == 0 {
            return Err(Error::config("shards", "must be at least 1"));
        }
        self.shards = shards;
        Ok(self)
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids
            .binary_search_by(|probe| probe.as_str().cmp(id))
            .ok()
    }

    /// Contiguous balanced entry ranges, one per shard.
    pub fn shard_ranges(&self) -> Vec<Range<usize>> {
        let parts = self.shards.min(self.len()).max(1);
        let mut start = 0;
        balanced_partition(self.len(), parts)
            .into_iter()
            .map(|size| {
                let r = start..start + size;
                start += size;
                r
            })
            .collect()
    }

    fn check_query(&self, q: &[f32], k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::config("k", "must be at least 1"));
        }
        if q.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: q.len(),
            });
        }
        Ok(())
    }

    /// Exact maximum-inner-product search. Returns `min(k, N)` hits.
    pub fn search(&self, q: &[f32], k: usize) -> Result<Vec<Hit>> {
        self.check_query(q, k)?;
        let merged: Vec<(f32, usize)> = self
            .shard_ranges()
            .into_par_iter()
            .map(|range| {
                let scored = range.map(|i| (dot_f32(q, self.vector(i)), i)).collect();
                top_k(scored, k)
            })
            .reduce(Vec::new, |mut a, b| {
                a.extend(b);
                a
            });
        Ok(self.hits(top_k(merged, k)))
    }

    pub fn search_f64(&self, q: &[f64], k: usize) -> Result<Vec<Hit>> {
        let q: Vec<f32> = q.iter().map(|x| *x as f32).collect();
        self.search(&q, k)
    }

    fn hits(&self, ranked: Vec<(f32, usize)>) -> Vec<Hit> {
        ranked
            .into_iter()
            .map(|(score, i)| Hit {
                id: self.ids[i].clone(),
                score,
            })
            .collect()
    }
}

/// Mean over queries of `|approx ∩ exact| / k`, each list cut to its first `k`.
pub fn recall_at_k<S: AsRef<str>>(approx: &[Vec<S>], exact: &[Vec<S>], k: usize) -> f64 {
    if approx.is_empty() || k == 0 {
        return 0.0;
    }
    let total: f64 = approx
        .iter()
        .zip(exact)
        .map(|(a, e)| {
            let truth: HashSet<&str> = e.iter().take(k).map(AsRef::as_ref).collect();
            let found = a
                .iter()
                .take(k)
                .filter(|id| truth.contains(id.as_ref()))
                .count();
            found as f64 / k as f64
        })
        .sum();
    total / approx.len() as f64
}
