//! Evaluating one set of questions against indices from different dates.

use std::collections::{BTreeMap, HashSet};

use chrono::Datelike;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Passage, PassageStore};
use crate::error::{Error, Result};
use crate::evalkit::metrics::{exact_match, normalize_answer};
use crate::index::EmbeddingIndex;
use crate::retriever::DualEncoder;

/// A cloze query whose answer depends on the year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalQA {
    pub query: String,
    pub answers_by_year: BTreeMap<i32, String>,
}

impl TemporalQA {
    pub fn validate(&self) -> Result<()> {
        let distinct: HashSet<String> = self
            .answers_by_year
            .values()
            .map(|a| normalize_answer(a))
            .collect();
        if self.answers_by_year.len() < 2 || distinct.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "{:?} needs answers for two years that differ",
                self.query
            )));
        }
        Ok(())
    }
}

/// Answers a query from its retrieved passages.
pub trait QaAnswerer: Sync {
    fn answer(&self, query: &[String], docs: &[&Passage]) -> Result<String>;
}

/// Picks the retrieved passage sharing the most query words (earliest rank
/// on ties) and answers with its first word that is not in the query.
#[derive(Debug, Clone, Copy, Default)]
pub struct OverlapAnswerer;

impl QaAnswerer for OverlapAnswerer {
    fn answer(&self, query: &[String], docs: &[&Passage]) -> Result<String> {
        let q: HashSet<String> = query.iter().map(|t| normalize_answer(t)).collect();
        let mut best: Option<(usize, &Passage)> = None;
        for d in docs {
            let shared: HashSet<String> = d
                .text
                .iter()
                .map(|t| normalize_answer(t))
                .filter(|t| q.contains(t))
                .collect();
            if best.is_none_or(|(n, _)| shared.len() > n) {
                best = Some((shared.len(), d));
            }
        }
        Ok(best
            .and_then(|(_, d)| {
                d.text
                    .iter()
                    .find(|t| !q.contains(&normalize_answer(t)))
                    .cloned()
            })
            .unwrap_or_default())
    }
}

/// An index with the passages it was built from.
#[derive(Debug, Clone, Copy)]
pub struct DatedIndex<'a> {
    pub index: &'a EmbeddingIndex,
    pub passages: &'a PassageStore,
}

impl DatedIndex<'_> {
    fn year(&self) -> Result<i32> {
        self.index
            .dump_date()
            .map(|d| d.year())
            .ok_or_else(|| Error::config("dump_date", "index has no dump date"))
    }
}

/// Accuracy of year-`t` answers when retrieving from the year-`i` index,
/// at `accuracy[t][i]`. Both axes list the two index years in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapMatrix {
    pub years: [i32; 2],
    pub accuracy: [[f64; 2]; 2],
    pub examples: usize,
}

impl SwapMatrix {
    pub fn matched(&self) -> [f64; 2] {
        [self.accuracy[0][0], self.accuracy[1][1]]
    }

    pub fn mismatched(&self) -> [f64; 2] {
        [self.accuracy[0][1], self.accuracy[1][0]]
    }
}

pub fn temporal_swap_eval<A: QaAnswerer + ?Sized>(
    dataset: &[TemporalQA],
    encoder: &DualEncoder,
    a: DatedIndex<'_>,
    b: DatedIndex<'_>,
    answerer: &A,
    k: usize,
) -> Result<SwapMatrix> {
    let (da, db) = (a.index.dump_date(), b.index.dump_date());
    if da.is_some() && da == db {
        return Err(Error::SameDumpDate(
            da.map(|d| d.to_string()).unwrap_or_default(),
        ));
    }
    let years = [a.year()?, b.year()?];
    if years[0] == years[1] {
        return Err(Error::SameDumpDate(format!(
            "both indices are from {}",
            years[0]
        )));
    }
    let usable: Vec<&TemporalQA> = dataset
        .iter()
        .filter(|qa| years.iter().all(|y| qa.answers_by_year.contains_key(y)))
        .collect();
    if usable.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no question has answers for both {} and {}",
            years[0], years[1]
        )));
    }
    for qa in &usable {
        qa.validate()?;
    }
    let indices = [a, b];
    let per_example = usable
        .par_iter()
        .map(|qa| {
            let query: Vec<String> = corpus::split_words(&qa.query).map(str::to_owned).collect();
            let q = encoder.encode_query(&query)?;
            let mut cells = [[0.0; 2]; 2];
            for (i, idx) in indices.iter().enumerate() {
                let hits = idx.index.search_f64(&q, k)?;
                let docs: Vec<&Passage> = hits
                    .iter()
                    .filter_map(|h| idx.passages.get(&h.id))
                    .collect();
                let answer = answerer.answer(&query, &docs)?;
                for (t, year) in years.iter().enumerate() {
                    cells[t][i] = exact_match(&answer, &qa.answers_by_year[year]);
                }
            }
            Ok(cells)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = usable.len() as f64;
    let mut accuracy = [[0.0; 2]; 2];
    for cells in &per_example {
        for t in 0..2 {
            for i in 0..2 {
                accuracy[t][i] += cells[t][i] / n;
            }
        }
    }
    Ok(SwapMatrix {
        years,
        accuracy,
        examples: usable.len(),
    })
}
