//! Reader scoring contract consumed by the retriever losses, plus an analytic
//! stand-in reader.
//!
//! [`OverlapLm`] is a smoothed unigram model: the probability of an output
//! token given a set of documents interpolates the token's relative frequency
//! in those documents with a uniform floor over the vocabulary. Several
//! documents are composed by pooling their counts, which mirrors a
//! fusion-in-decoder reader attending over all encoded documents at once.
//! The query does not enter the counts.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::numeric::log_sum_exp;

/// A retrieved document as seen by the reader.
#[derive(Debug, Clone, Copy)]
pub struct Doc<'a> {
    pub id: &'a str,
    pub tokens: &'a [String],
}

impl<'a> Doc<'a> {
    pub fn new(id: &'a str, tokens: &'a [String]) -> Self {
        Doc { id, tokens }
    }
}

impl<'a> From<&'a crate::corpus::Passage> for Doc<'a> {
    fn from(p: &'a crate::corpus::Passage) -> Self {
        Doc::new(&p.id, &p.text)
    }
}

/// Nonnegative per-document relevance read off the reader.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRelevance {
    pub per_doc: Vec<f64>,
}

pub trait LmScorer: Sync {
    /// `ln p(output | query, d_k)` for each document.
    fn per_doc_loglik(
        &self,
        query: &[String],
        docs: &[Doc<'_>],
        output: &[String],
    ) -> Result<Vec<f64>>;

    /// `ln p(output | query, all docs)`.
    fn joint_loglik(&self, query: &[String], docs: &[Doc<'_>], output: &[String]) -> Result<f64>;

    /// Entry `k` is the joint log-likelihood with document `k` removed.
    fn loo_logliks(
        &self,
        query: &[String],
        docs: &[Doc<'_>],
        output: &[String],
    ) -> Result<Vec<f64>> {
        if docs.len() < 2 {
            return Err(Error::LeaveOneOutUndefined);
        }
        (0..docs.len())
            .map(|k| {
                let rest: Vec<Doc<'_>> = docs
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != k)
                    .map(|(_, d)| *d)
                    .collect();
                self.joint_loglik(query, &rest, output)
            })
            .collect()
    }

    fn attention_relevance(
        &self,
        query: &[String],
        docs: &[Doc<'_>],
        output: &[String],
    ) -> Result<AttentionRelevance>;

    /// Per-document, per-output-token log-likelihoods (`K × |output|`), for
    /// token-level marginal likelihood. Scorers without token factorization
    /// return `None`.
    fn per_doc_token_logliks(
        &self,
        _query: &[String],
        _docs: &[Doc<'_>],
        _output: &[String],
    ) -> Result<Option<Vec<Vec<f64>>>> {
        Ok(None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapLm {
    vocab_size: usize,
    lambda: f64,
}

pub const DEFAULT_LAMBDA: f64 = 0.5;

struct Counts<'a> {
    counts: HashMap<&'a str, usize>,
    len: usize,
}

impl<'a> Counts<'a> {
    fn of<I: IntoIterator<Item = &'a String>>(tokens: I) -> Self {
        let mut counts = HashMap::new();
        let mut len = 0;
        for t in tokens {
            *counts.entry(t.as_str()).or_insert(0) += 1;
            len += 1;
        }
        Counts { counts, len }
    }

    fn count(&self, t: &str) -> usize {
        self.counts.get(t).copied().unwrap_or(0)
    }

    fn frequency(&self, t: &str) -> f64 {
        if self.len == 0 {
            0.0
        } else {
            self.count(t) as f64 / self.len as f64
        }
    }
}

impl OverlapLm {
    pub fn new(vocab_size: usize, lambda: f64) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::config("vocab_size", "must be at least 1"));
        }
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(Error::config("lambda", "must lie strictly inside (0, 1)"));
        }
        Ok(OverlapLm { vocab_size, lambda })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    fn token_loglik(&self, counts: &Counts<'_>, token: &str) -> f64 {
        (self.lambda * counts.frequency(token) + (1.0 - self.lambda) / self.vocab_size as f64).ln()
    }

    fn sequence_loglik(&self, counts: &Counts<'_>, output: &[String]) -> f64 {
        output.iter().map(|t| self.token_loglik(counts, t)).sum()
    }
}

fn require_output(output: &[String]) -> Result<()> {
    if output.is_empty() {
        Err(Error::EmptyInput)
    } else {
        Ok(())
    }
}

impl LmScorer for OverlapLm {
    fn per_doc_loglik(
        &self,
        _query: &[String],
        docs: &[Doc<'_>],
        output: &[String],
    ) -> Result<Vec<f64>> {
        require_output(output)?;
        Ok(docs
            .iter()
            .map(|d| self.sequence_loglik(&Counts::of(d.tokens), output))
            .collect())
    }

    fn joint_loglik(&self, _query: &[String], docs: &[Doc<'_>], output: &[String]) -> Result<f64> {
        require_output(output)?;
        if docs.is_empty() {
            return Err(Error::EmptyInput);
        }
        let pooled = Counts::of(docs.iter().flat_map(|d| d.tokens.iter()));
        Ok(self.sequence_loglik(&pooled, output))
    }

    fn attention_relevance(
        &self,
        _query: &[String],
        docs: &[Doc<'_>],
        output: &[String],
    ) -> Result<AttentionRelevance> {
        require_output(output)?;
        let per_doc = docs
            .iter()
            .map(|d| {
                let counts = Counts::of(d.tokens);
                if counts.len == 0 {
                    return 0.0;
                }
                let hits: usize = output.iter().map(|t| counts.count(t)).sum();
                hits as f64 / (counts.len * output.len()) as f64
            })
            .collect();
        Ok(AttentionRelevance { per_doc })
    }

    fn per_doc_token_logliks(
        &self,
        _query: &[String],
        docs: &[Doc<'_>],
        output: &[String],
    ) -> Result<Option<Vec<Vec<f64>>>> {
        require_output(output)?;
        Ok(Some(
            docs.iter()
                .map(|d| {
                    let counts = Counts::of(d.tokens);
                    output
                        .iter()
                        .map(|t| self.token_loglik(&counts, t))
                        .collect()
                })
                .collect(),
        ))
    }
}

/// One fixture line of a [`TableScorer`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub doc_id: String,
    pub loglik: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance: Option<f64>,
}

/// Scorer returning fixed per-document values looked up by document id.
/// Joint scores compose per-document likelihoods as a uniform mixture.
#[derive(Debug, Clone, Default)]
pub struct TableScorer {
    logliks: HashMap<String, f64>,
    relevance: HashMap<String, f64>,
}

impl TableScorer {
    pub fn new<I: IntoIterator<Item = ScoreRecord>>(records: I) -> Self {
        let mut scorer = TableScorer::default();
        for r in records {
            if let Some(rel) = r.relevance {
                scorer.relevance.insert(r.doc_id.clone(), rel);
            }
            scorer.logliks.insert(r.doc_id, r.loglik);
        }
        scorer
    }

    pub fn from_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(io::read_jsonl::<ScoreRecord>(path)?))
    }

    fn lookup(&self, id: &str) -> Result<f64> {
        self.logliks
            .get(id)
            .copied()
            .ok_or_else(|| Error::config(id, "no score fixture for document"))
    }
}

impl LmScorer for TableScorer {
    fn per_doc_loglik(
        &self,
        _query: &[String],
        docs: &[Doc<'_>],
        _output: &[String],
    ) -> Result<Vec<f64>> {
        docs.iter().map(|d| self.lookup(d.id)).collect()
    }

    fn joint_loglik(&self, query: &[String], docs: &[Doc<'_>], output: &[String]) -> Result<f64> {
        if docs.is_empty() {
            return Err(Error::EmptyInput);
        }
        let per_doc = self.per_doc_loglik(query, docs, output)?;
        Ok(log_sum_exp(&per_doc) - (docs.len() as f64).ln())
    }

    fn attention_relevance(
        &self,
        _query: &[String],
        docs: &[Doc<'_>],
        _output: &[String],
    ) -> Result<AttentionRelevance> {
        let per_doc = docs
            .iter()
            .map(|d| match self.relevance.get(d.id) {
                Some(r) => Ok(*r),
                None => self.lookup(d.id).map(f64::exp),
            })
            .collect::<Result<_>>()?;
        Ok(AttentionRelevance { per_doc })
    }
}
