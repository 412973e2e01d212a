//! Multiple-choice inference marginalized over answer orderings.

use std::fmt;
use std::str::FromStr;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Passage};
use crate::error::{Error, Result};
use crate::evalkit::templates;
use crate::lm::{Doc, LmScorer};
use crate::numeric;

pub const LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceTask {
    pub question: String,
    pub options: [String; 4],
    pub gold: usize,
}

impl ChoiceTask {
    pub fn validate(&self) -> Result<()> {
        if self.gold >= 4 {
            return Err(Error::config(
                "gold",
                format!("option index {} out of range", self.gold),
            ));
        }
        Ok(())
    }

    /// The same task with its options rearranged: new option `j` is old
    /// option `order[j]`.
    pub fn reordered(&self, order: [usize; 4]) -> ChoiceTask {
        let gold = order
            .iter()
            .position(|&o| o == self.gold)
            .expect("order is a permutation");
        ChoiceTask {
            question: self.question.clone(),
            options: order.map(|o| self.options[o].clone()),
            gold,
        }
    }
}

/// Reads a question with its options in one fixed order and returns a
/// distribution over the four letters.
pub trait ChoiceScorer: Sync {
    fn letter_probs(
        &self,
        question: &str,
        options: &[String; 4],
        docs: &[&Passage],
    ) -> Result<[f64; 4]>;
}

/// Adapts a reader to multiple choice: each letter's logit is the mean
/// per-token log-likelihood of the option shown under it, read from the
/// templated prompt and the retrieved passages.
#[derive(Debug, Clone)]
pub struct ReaderChoiceScorer<S> {
    pub reader: S,
}

impl<S: LmScorer> ChoiceScorer for ReaderChoiceScorer<S> {
    fn letter_probs(
        &self,
        question: &str,
        options: &[String; 4],
        docs: &[&Passage],
    ) -> Result<[f64; 4]> {
        let prompt: Vec<String> = corpus::split_words(&templates::choice_input(question, options))
            .map(str::to_owned)
            .collect();
        let docs: Vec<Doc<'_>> = docs.iter().map(|p| Doc::from(*p)).collect();
        let mut logits = [0.0; 4];
        for (logit, option) in logits.iter_mut().zip(options) {
            let output: Vec<String> = corpus::split_words(option).map(str::to_owned).collect();
            if output.is_empty() {
                return Err(Error::EmptyInput);
            }
            *logit = self.reader.joint_loglik(&prompt, &docs, &output)? / output.len() as f64;
        }
        let p = numeric::softmax(&logits, 1.0)?;
        Ok([p[0], p[1], p[2], p[3]])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DebiasMode {
    Standard,
    Cyclic4,
    All24,
}

impl FromStr for DebiasMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(DebiasMode::Standard),
            "cyclic4" => Ok(DebiasMode::Cyclic4),
            "all24" => Ok(DebiasMode::All24),
            other => Err(Error::config(
                "mode",
                format!("unknown inference mode {other:?}"),
            )),
        }
    }
}

impl fmt::Display for DebiasMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DebiasMode::Standard => "standard",
            DebiasMode::Cyclic4 => "cyclic4",
            DebiasMode::All24 => "all24",
        })
    }
}

/// Orderings presented to the scorer; entry `j` of an ordering is the
/// option shown under letter `j`.
pub fn orderings(mode: DebiasMode) -> Vec<[usize; 4]> {
    match mode {
        DebiasMode::Standard => vec![[0, 1, 2, 3]],
        DebiasMode::Cyclic4 => (0..4).map(|s| [0, 1, 2, 3].map(|j| (j + s) % 4)).collect(),
        DebiasMode::All24 => (0..4)
            .permutations(4)
            .map(|p| [p[0], p[1], p[2], p[3]])
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DebiasResult {
    pub prediction: usize,
    pub posterior: [f64; 4],
    pub scorer_calls: usize,
}

/// Index of the largest entry, the lowest index on ties.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Credits each letter's probability to the option shown under it, sums
/// over orderings and normalizes. Each option's contributions are summed
/// in sorted order so the posterior does not depend on the order in which
/// orderings were visited.
pub fn debias_infer<C: ChoiceScorer + ?Sized>(
    task: &ChoiceTask,
    docs: &[&Passage],
    scorer: &C,
    mode: DebiasMode,
) -> Result<DebiasResult> {
    task.validate()?;
    let orders = orderings(mode);
    let mut credit: [Vec<f64>; 4] = Default::default();
    for order in &orders {
        let shown = order.map(|o| task.options[o].clone());
        let probs = scorer.letter_probs(&task.question, &shown, docs)?;
        numeric::validate_distribution(&probs)?;
        for (letter, &option) in order.iter().enumerate() {
            credit[option].push(probs[letter]);
        }
    }
    let mut mass = [0.0; 4];
    for (m, c) in mass.iter_mut().zip(credit.iter_mut()) {
        c.sort_by(f64::total_cmp);
        *m = c.iter().sum();
    }
    let mut sorted = mass;
    sorted.sort_by(f64::total_cmp);
    let total: f64 = sorted.iter().sum();
    let posterior = mass.map(|m| m / total);
    Ok(DebiasResult {
        prediction: argmax_lowest(&posterior),
        posterior,
        scorer_calls: orders.len(),
    })
}
