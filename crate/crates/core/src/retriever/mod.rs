//! Dual encoder with mean pooling and dot-product relevance.
//!
//! Queries and documents are embedded by two towers of identical shape: an
//! embedding table followed by an optional square projection. Both towers
//! start from the same seeded initialization. Query-side training updates the
//! query tower only, so document embeddings already stored in an index stay
//! valid.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric;

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const UNK: &str = "[UNK]";
/// Single mask token of the retriever vocabulary; sentinel masks are mapped
/// to it before encoding a masked query.
pub const MASK: &str = "[MASK]";

/// Retriever temperature used when none is configured.
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary with `[UNK]` at row 0 and `[MASK]` at row 1,
    /// followed by the distinct input tokens in sorted order.
    pub fn build<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let rest: BTreeSet<String> = tokens
            .into_iter()
            .map(|t| t.as_ref().to_owned())
            .filter(|t| t != UNK && t != MASK)
            .collect();
        let mut list = vec![UNK.to_owned(), MASK.to_owned()];
        list.extend(rest);
        Self::from_tokens(list)
    }

    pub(crate) fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    /// Row of a token, falling back to the `[UNK]` row.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// One tower: embedding table plus optional projection, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    dim: usize,
    table: Vec<f64>,
    projection: Option<Vec<f64>>,
}

impl Encoder {
    pub fn new(dim: usize, table: Vec<f64>, projection: Option<Vec<f64>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("dim", "must be at least 1"));
        }
        if !table.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: table.len() % dim,
            });
        }
        if let Some(p) = &projection {
            if p.len() != dim * dim {
                return Err(Error::DimensionMismatch {
                    expected: dim * dim,
                    found: p.len(),
                });
            }
        }
        if table
            .iter()
            .chain(projection.iter().flatten())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("encoder parameters"));
        }
        Ok(Encoder {
            dim,
            table,
            projection,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.table.len() / self.dim
    }

    pub fn row(&self, id: usize) -> &[f64] {
        &self.table[id * self.dim..(id + 1) * self.dim]
    }

    pub fn row_mut(&mut self, id: usize) -> &mut [f64] {
        &mut self.table[id * self.dim..(id + 1) * self.dim]
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn projection(&self) -> Option<&[f64]> {
        self.projection.as_deref()
    }

    pub fn projection_mut(&mut self) -> Option<&mut [f64]> {
        self.projection.as_deref_mut()
    }

    fn pooled(&self, ids: &[usize]) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for &id in ids {
            for (a, v) in acc.iter_mut().zip(self.row(id)) {
                *a += v;
            }
        }
        let n = ids.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    fn project(&self, pooled: &[f64]) -> Vec<f64> {
        match &self.projection {
            None => pooled.to_vec(),
            Some(p) => (0..self.dim)
                .map(|i| {
                    p[i * self.dim..(i + 1) * self.dim]
                        .iter()
                        .zip(pooled)
                        .map(|(w, x)| w * x)
                        .sum()
                })
                .collect(),
        }
    }

    /// Projection of the mean token embedding.
    pub fn embed_ids(&self, ids: &[usize]) -> Result<Vec<f64>> {
        if ids.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(self.project(&self.pooled(ids)))
    }

    /// Accumulates the gradient of a scalar with respect to this tower given
    /// the gradient `upstream` with respect to the tower's output for `ids`.
    fn backward(&self, ids: &[usize], upstream: &[f64], grad: &mut EncoderGrad) {
        let d = self.dim;
        let pooled_grad = match &self.projection {
            None => upstream.to_vec(),
            Some(p) => {
                let pooled = self.pooled(ids);
                let proj_grad = grad.projection.get_or_insert_with(|| vec![0.0; d * d]);
                for i in 0..d {
                    for j in 0..d {
                        proj_grad[i * d + j] += upstream[i] * pooled[j];
                    }
                }
                (0..d)
                    .map(|j| (0..d).map(|i| p[i * d + j] * upstream[i]).sum())
                    .collect()
            }
        };
        let share = 1.0 / ids.len() as f64;
        for &id in ids {
            let row = grad.rows.entry(id).or_insert_with(|| vec![0.0; d]);
            for (r, g) in row.iter_mut().zip(&pooled_grad) {
                *r += share * g;
            }
        }
    }

    fn apply(&mut self, grad: &EncoderGrad, lr: f64) {
        for (&id, g) in &grad.rows {
            for (w, gi) in self.row_mut(id).iter_mut().zip(g) {
                *w -= lr * gi;
            }
        }
        if let (Some(p), Some(g)) = (&mut self.projection, &grad.projection) {
            for (w, gi) in p.iter_mut().zip(g) {
                *w -= lr * gi;
            }
        }
    }
}

/// Sparse gradient of one tower: touched embedding rows plus the projection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EncoderGrad {
    pub rows: BTreeMap<usize, Vec<f64>>,
    pub projection: Option<Vec<f64>>,
}

impl EncoderGrad {
    pub fn is_zero(&self) -> bool {
        self.rows.values().flatten().all(|v| *v == 0.0)
            && self.projection.iter().flatten().all(|v| *v == 0.0)
    }

    fn add_scaled(&mut self, other: &EncoderGrad, scale: f64) {
        for (&id, g) in &other.rows {
            let row = self.rows.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            for (r, v) in row.iter_mut().zip(g) {
                *r += scale * v;
            }
        }
        if let Some(g) = &other.projection {
            let p = self.projection.get_or_insert_with(|| vec![0.0; g.len()]);
            for (r, v) in p.iter_mut().zip(g) {
                *r += scale * v;
            }
        }
    }

    pub fn row(&self, id: usize) -> Option<&[f64]> {
        self.rows.get(&id).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DualGrad {
    pub query: EncoderGrad,
    pub doc: EncoderGrad,
}

impl DualGrad {
    pub fn add_scaled(&mut self, other: &DualGrad, scale: f64) {
        self.query.add_scaled(&other.query, scale);
        self.doc.add_scaled(&other.doc, scale);
    }

    pub fn is_zero(&self) -> bool {
        self.query.is_zero() && self.doc.is_zero()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Fixed,
    QuerySide,
    Full,
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(TrainMode::Fixed),
            "query_side" => Ok(TrainMode::QuerySide),
            "full" => Ok(TrainMode::Full),
            other => Err(Error::config(
                "mode",
                format!("unknown retriever mode `{other}`"),
            )),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Fixed => "fixed",
            TrainMode::QuerySide => "query_side",
            TrainMode::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    vocab: Vocab,
    query: Encoder,
    doc: Encoder,
}

impl DualEncoder {
    /// Seeded initialization: entries uniform in `[-1/sqrt(d), 1/sqrt(d)]`,
    /// projection (when enabled) at identity, document tower a copy of the
    /// query tower.
    pub fn init(vocab: Vocab, dim: usize, with_projection: bool, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("dim", "must be at least 1"));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table: Vec<f64> = (0..vocab.len() * dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let projection = with_projection.then(|| {
            let mut p = vec![0.0; dim * dim];
            (0..dim).for_each(|i| p[i * dim + i] = 1.0);
            p
        });
        let tower = Encoder::new(dim, table, projection)?;
        Ok(DualEncoder {
            vocab,
            query: tower.clone(),
            doc: tower,
        })
    }

    pub fn from_parts(vocab: Vocab, query: Encoder, doc: Encoder) -> Result<Self> {
        if query.dim != doc.dim {
            return Err(Error::DimensionMismatch {
                expected: query.dim,
                found: doc.dim,
            });
        }
        for tower in [&query, &doc] {
            if tower.rows() != vocab.len() {
                return Err(Error::DimensionMismatch {
                    expected: vocab.len(),
                    found: tower.rows(),
                });
            }
        }
        if query.projection.is_some() != doc.projection.is_some() {
            return Err(Error::Format("towers disagree on projection".into()));
        }
        Ok(DualEncoder { vocab, query, doc })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.query.dim
    }

    pub fn query_tower(&self) -> &Encoder {
        &self.query
    }

    pub fn doc_tower(&self) -> &Encoder {
        &self.doc
    }

    pub fn query_tower_mut(&mut self) -> &mut Encoder {
        &mut self.query
    }

    pub fn doc_tower_mut(&mut self) -> &mut Encoder {
        &mut self.doc
    }

    pub fn token_ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.vocab.id(t.as_ref())).collect()
    }

    pub fn encode_query<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<f64>> {
        self.query.embed_ids(&self.token_ids(tokens))
    }

    pub fn encode_doc<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<f64>> {
        self.doc.embed_ids(&self.token_ids(tokens))
    }

    /// Back-propagates `score_grad` (the gradient of a loss with respect to
    /// each document's dot-product score) into the tower parameters.
    pub fn backprop_scores<S: AsRef<str>, D: AsRef<[S]>>(
        &self,
        query: &[S],
        docs: &[D],
        score_grad: &[f64],
        mode: TrainMode,
    ) -> Result<DualGrad> {
        if mode == TrainMode::Fixed {
            return Err(Error::RetrieverFrozen);
        }
        if docs.len() != score_grad.len() {
            return Err(Error::DimensionMismatch {
                expected: docs.len(),
                found: score_grad.len(),
            });
        }
        let q_ids = self.token_ids(query);
        let q = self.query.embed_ids(&q_ids)?;
        let doc_ids: Vec<Vec<usize>> = docs.iter().map(|d| self.token_ids(d.as_ref())).collect();
        let doc_vecs = doc_ids
            .iter()
            .map(|ids| self.doc.embed_ids(ids))
            .collect::<Result<Vec<_>>>()?;

        let mut grad = DualGrad::default();
        let mut q_upstream = vec![0.0; self.dim()];
        for (g, d) in score_grad.iter().zip(&doc_vecs) {
            for (u, v) in q_upstream.iter_mut().zip(d) {
                *u += g * v;
            }
        }
        self.query.backward(&q_ids, &q_upstream, &mut grad.query);

        if mode == TrainMode::Full {
            for (g, ids) in score_grad.iter().zip(&doc_ids) {
                let upstream: Vec<f64> = q.iter().map(|v| g * v).collect();
                self.doc.backward(ids, &upstream, &mut grad.doc);
            }
        }
        Ok(grad)
    }

    /// Plain gradient step. Document-tower entries are only present in the
    /// gradient when it was computed in full mode.
    pub fn apply(&mut self, grad: &DualGrad, lr: f64) {
        self.query.apply(&grad.query, lr);
        self.doc.apply(&grad.doc, lr);
    }
}

pub fn encode<S: AsRef<str>>(encoder: &Encoder, vocab: &Vocab, text: &[S]) -> Result<Vec<f64>> {
    let ids: Vec<usize> = text.iter().map(|t| vocab.id(t.as_ref())).collect();
    encoder.embed_ids(&ids)
}

pub fn score(q_vec: &[f64], d_vec: &[f64]) -> Result<f64> {
    numeric::dot(q_vec, d_vec)
}

/// Temperature softmax over retrieval scores.
pub fn retrieval_distribution(scores: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("retrieval scores"));
    }
    numeric::softmax(scores, temperature)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalDistribution {
    pub doc_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
    pub temperature: f64,
}

impl RetrievalDistribution {
    pub fn new(doc_ids: Vec<String>, scores: Vec<f64>, temperature: f64) -> Result<Self> {
        if doc_ids.len() != scores.len() {
            return Err(Error::DimensionMismatch {
                expected: doc_ids.len(),
                found: scores.len(),
            });
        }
        let probs = retrieval_distribution(&scores, temperature)?;
        Ok(RetrievalDistribution {
            doc_ids,
            scores,
            probs,
            temperature,
        })
    }

    /// A distribution over anonymous documents, ids `"0".."K-1"`.
    pub fn from_scores(scores: Vec<f64>, temperature: f64) -> Result<Self> {
        let ids = (0..scores.len()).map(|i| i.to_string()).collect();
        Self::new(ids, scores, temperature)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Gradient of `KL(target || p_retr)` with respect to the tower parameters.
/// The target is a constant; the gradient with respect to the scores is
/// `(p_retr - target) / temperature`.
pub fn retriever_gradient<S: AsRef<str>, D: AsRef<[S]>>(
    encoder: &DualEncoder,
    query: &[S],
    docs: &[D],
    target: &[f64],
    temperature: f64,
    mode: TrainMode,
) -> Result<DualGrad> {
    if mode == TrainMode::Fixed {
        return Err(Error::RetrieverFrozen);
    }
    numeric::validate_distribution(target)?;
    if target.len() != docs.len() {
        return Err(Error::DimensionMismatch {
            expected: docs.len(),
            found: target.len(),
        });
    }
    let q = encoder.encode_query(query)?;
    let scores = docs
        .iter()
        .map(|d| encoder.encode_doc(d.as_ref()).and_then(|v| score(&q, &v)))
        .collect::<Result<Vec<_>>>()?;
    let probs = retrieval_distribution(&scores, temperature)?;
    let score_grad: Vec<f64> = probs
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) / temperature)
        .collect();
    encoder.backprop_scores(query, docs, &score_grad, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    fn small_encoder(projection: bool, seed: u64) -> DualEncoder {
        let vocab = Vocab::build(["a", "b", "c", "d", "e", "f"]);
        DualEncoder::init(vocab, 4, projection, seed).unwrap()
    }

    #[test]
    fn vocab_reserves_special_rows() {
        let v = Vocab::build(["b", "a", "a"]);
        assert_eq!(v.tokens(), [UNK, MASK, "a", "b"]);
        assert_eq!(v.id("zzz"), 0);
        assert_eq!(v.id(MASK), 1);
    }

    #[test]
    fn encode_is_mean_of_embeddings() {
        let vocab = Vocab::build(["x", "y"]);
        let table = vec![0.0, 0.0, 0.0, 0.0, 1.0, 3.0, -1.0, 5.0];
        let enc = Encoder::new(2, table, None).unwrap();
        assert_eq!(encode(&enc, &vocab, &toks("x y")).unwrap(), vec![0.0, 4.0]);
        assert_eq!(encode(&enc, &vocab, &toks("x")).unwrap(), vec![1.0, 3.0]);
        assert_eq!(encode(&enc, &vocab, &toks("x x")).unwrap(), vec![1.0, 3.0]);
        assert!(matches!(
            encode::<String>(&enc, &vocab, &[]),
            Err(Error::EmptyInput)
        ));
    }

    #[test]
    fn identity_projection_is_transparent() {
        let with = small_encoder(true, 3);
        let without = small_encoder(false, 3);
        assert_eq!(
            with.encode_query(&toks("a b c")).unwrap(),
            without.encode_query(&toks("a b c")).unwrap()
        );
    }

    #[test]
    fn init_bounds_and_determinism() {
        let a = small_encoder(false, 11);
        let b = small_encoder(false, 11);
        assert_eq!(a, b);
        let bound = 1.0 / 2.0;
        assert!(a.query_tower().table().iter().all(|v| v.abs() <= bound));
        assert_eq!(a.query_tower(), a.doc_tower());
    }

    #[test]
    fn score_examples() {
        assert_eq!(score(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(score(&[1.0, 2.0], &[3.0, -1.0]).unwrap(), 1.0);
        assert!(score(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn distribution_examples() {
        assert_eq!(
            retrieval_distribution(&[2.0; 4], 0.1).unwrap(),
            vec![0.25; 4]
        );
        assert_eq!(retrieval_distribution(&[-3.0], 0.1).unwrap(), vec![1.0]);
        let p = retrieval_distribution(&[1.0, 0.0], 1.0).unwrap();
        // logistic(1) = 1 / (1 + e^-1)
        assert!((p[0] - 0.7311).abs() < 1e-4);
        assert!((p[1] - 0.2689).abs() < 1e-4);
        assert!(retrieval_distribution(&[1.0], 0.0).is_err());
        assert!(retrieval_distribution(&[1.0], -1.0).is_err());
        assert!(retrieval_distribution(&[f64::NAN], 1.0).is_err());
        assert!(retrieval_distribution(&[f64::INFINITY], 1.0).is_err());
    }

    #[test]
    fn temperature_limits() {
        let s = [0.3, -1.2, 2.5, 0.0];
        let hot = retrieval_distribution(&s, 1e6).unwrap();
        assert!(hot.iter().all(|p| (p - 0.25).abs() < 1e-4));
        let cold = retrieval_distribution(&s, 1e-6).unwrap();
        assert!((cold[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_mode_is_an_error() {
        let enc = small_encoder(false, 1);
        let docs = vec![toks("a"), toks("b")];
        let err = retriever_gradient(&enc, &toks("a"), &docs, &[0.5, 0.5], 0.1, TrainMode::Fixed)
            .unwrap_err();
        assert_eq!(err.to_string(), "retriever frozen");
    }

    #[test]
    fn gradient_vanishes_at_target() {
        let enc = small_encoder(true, 5);
        let q = toks("a b");
        let docs = vec![toks("c d"), toks("a e"), toks("f")];
        let qv = enc.encode_query(&q).unwrap();
        let scores: Vec<f64> = docs
            .iter()
            .map(|d| score(&qv, &enc.encode_doc(d).unwrap()).unwrap())
            .collect();
        let p = retrieval_distribution(&scores, 0.5).unwrap();
        let g = retriever_gradient(&enc, &q, &docs, &p, 0.5, TrainMode::Full).unwrap();
        let max = g
            .query
            .rows
            .values()
            .chain(g.doc.rows.values())
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-12, "{max}");
    }

    #[test]
    fn query_side_leaves_doc_tower_untouched() {
        let mut enc = small_encoder(true, 9);
        let q = toks("a b");
        let docs = vec![toks("c d"), toks("a e")];
        let g =
            retriever_gradient(&enc, &q, &docs, &[1.0, 0.0], 0.1, TrainMode::QuerySide).unwrap();
        assert!(g.doc.is_zero());
        assert!(!g.query.is_zero());
        let before = enc.doc_tower().clone();
        enc.apply(&g, 0.5);
        assert_eq!(enc.doc_tower(), &before);
    }

    fn kl_loss(
        enc: &DualEncoder,
        q: &[String],
        docs: &[Vec<String>],
        target: &[f64],
        t: f64,
    ) -> f64 {
        let qv = enc.encode_query(q).unwrap();
        let scores: Vec<f64> = docs
            .iter()
            .map(|d| score(&qv, &enc.encode_doc(d).unwrap()).unwrap())
            .collect();
        let p = retrieval_distribution(&scores, t).unwrap();
        target
            .iter()
            .zip(&p)
            .filter(|(a, _)| **a > 0.0)
            .map(|(a, b)| a * (a / b).ln())
            .sum()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    // Central finite differences over every parameter the gradient touches.
    fn check_fd(enc: &DualEncoder, q: &[String], docs: &[Vec<String>], target: &[f64], t: f64) {
        let g = retriever_gradient(enc, q, docs, target, t, TrainMode::Full).unwrap();
        let h = 1e-5;
        let towers: [(&EncoderGrad, bool); 2] = [(&g.query, true), (&g.doc, false)];
        for (tg, is_query) in towers {
            for (&row, grad_row) in &tg.rows {
                for (j, &analytic) in grad_row.iter().enumerate() {
                    let mut plus = enc.clone();
                    let mut minus = enc.clone();
                    let (tp, tm) = if is_query {
                        (plus.query_tower_mut(), minus.query_tower_mut())
                    } else {
                        (plus.doc_tower_mut(), minus.doc_tower_mut())
                    };
                    tp.row_mut(row)[j] += h;
                    tm.row_mut(row)[j] -= h;
                    let fd = (kl_loss(&plus, q, docs, target, t)
                        - kl_loss(&minus, q, docs, target, t))
                        / (2.0 * h);
                    assert!(
                        rel_err(fd, analytic) < 1e-4,
                        "row {row} col {j}: fd {fd} vs {analytic}"
                    );
                }
            }
            if let Some(pg) = &tg.projection {
                for (idx, gv) in pg.iter().enumerate() {
                    let mut plus = enc.clone();
                    let mut minus = enc.clone();
                    let (tp, tm) = if is_query {
                        (plus.query_tower_mut(), minus.query_tower_mut())
                    } else {
                        (plus.doc_tower_mut(), minus.doc_tower_mut())
                    };
                    tp.projection_mut().unwrap()[idx] += h;
                    tm.projection_mut().unwrap()[idx] -= h;
                    let fd = (kl_loss(&plus, q, docs, target, t)
                        - kl_loss(&minus, q, docs, target, t))
                        / (2.0 * h);
                    assert!(rel_err(fd, *gv) < 1e-4, "proj {idx}: fd {fd} vs {gv}");
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let vocab = Vocab::build(["a", "b", "c", "d", "e", "f", "g"]);
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let dim = rng.random_range(1..=8);
            let enc = DualEncoder::init(vocab.clone(), dim, seed % 2 == 0, seed).unwrap();
            let words = ["a", "b", "c", "d", "e", "f", "g"];
            let mut sample = |n: usize| -> Vec<String> {
                (0..n)
                    .map(|_| words[rng.random_range(0..words.len())].to_owned())
                    .collect()
            };
            let q = sample(3);
            let k = 2 + (seed as usize % 4);
            let docs: Vec<Vec<String>> = (0..k).map(|_| sample(3)).collect();
            let raw: Vec<f64> = (0..k)
                .map(|i| 1.0 + i as f64 * 0.37 + seed as f64 * 0.01)
                .collect();
            let total: f64 = raw.iter().sum();
            let target: Vec<f64> = raw.iter().map(|r| r / total).collect();
            check_fd(&enc, &q, &docs, &target, 0.7);
        }
    }

    proptest! {
        #[test]
        fn distribution_is_valid_and_shift_invariant(
            scores in proptest::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
            t in 0.01f64..10.0,
        ) {
            let p = retrieval_distribution(&scores, t).unwrap();
            prop_assert!(p.iter().all(|x| *x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let q = retrieval_distribution(&shifted, t).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn temperature_preserves_argmax(
            scores in proptest::collection::vec(-5.0f64..5.0, 2..8),
            t in 0.05f64..5.0,
            factor in 0.1f64..10.0,
        ) {
            let argmax = |p: &[f64]| p.iter().enumerate().fold(0, |best, (i, v)| if *v > p[best] { i } else { best });
            let a = retrieval_distribution(&scores, t).unwrap();
            let b = retrieval_distribution(&scores, t * factor).unwrap();
            let top = argmax(&scores);
            // skip near ties, where the softmax rounding can reorder
            let second = scores.iter().enumerate().filter(|(i, _)| *i != top).map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
            prop_assume!(scores[top] - second > 1e-6);
            prop_assert_eq!(argmax(&a), top);
            prop_assert_eq!(argmax(&b), top);
        }
    }
}
