//! Self-supervised (query, output) pairs built from raw text.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::corpus::{self, RawDocument};
use crate::error::{Error, Result};
use crate::retriever::MASK;

/// Section titles that never become title-to-section targets.
pub const EXCLUDED_SECTIONS: [&str; 4] = [
    "See also",
    "References",
    "Further reading",
    "External links",
];

/// Token placed between the article title and the section title.
pub const TITLE_SEPARATOR: &str = ";";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretextTask {
    PrefixLm,
    Mlm,
    TitleToSection,
}

impl FromStr for PretextTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefix_lm" => Ok(PretextTask::PrefixLm),
            "mlm" => Ok(PretextTask::Mlm),
            "title_to_section" => Ok(PretextTask::TitleToSection),
            other => Err(Error::config(
                "task",
                format!("unknown pretext task {other:?}"),
            )),
        }
    }
}

impl fmt::Display for PretextTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PretextTask::PrefixLm => "prefix_lm",
            PretextTask::Mlm => "mlm",
            PretextTask::TitleToSection => "title_to_section",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretextExample {
    /// Reader input.
    pub query: Vec<String>,
    pub output: Vec<String>,
    /// Retriever input; differs from `query` only for masked LM.
    pub retrieval_query: Vec<String>,
    pub origin_passage_id: String,
    /// Every passage id the example was built from, excluded at retrieval.
    pub excluded_ids: Vec<String>,
    pub task: PretextTask,
}

pub fn prefix_lm_example(tokens: &[String], origin_passage_id: &str) -> Result<PretextExample> {
    if tokens.len() < 2 {
        return Err(Error::ChunkTooShort {
            needed: 2,
            got: tokens.len(),
        });
    }
    let split = tokens.len().div_ceil(2);
    Ok(PretextExample {
        query: tokens[..split].to_vec(),
        output: tokens[split..].to_vec(),
        retrieval_query: tokens[..split].to_vec(),
        origin_passage_id: origin_passage_id.to_owned(),
        excluded_ids: vec![origin_passage_id.to_owned()],
        task: PretextTask::PrefixLm,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlmConfig {
    pub mask_ratio: f64,
    pub mean_span: f64,
    pub max_span: usize,
    pub min_len: usize,
}

impl Default for MlmConfig {
    fn default() -> Self {
        MlmConfig {
            mask_ratio: 0.15,
            mean_span: 3.0,
            max_span: 10,
            min_len: 10,
        }
    }
}

impl MlmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::config("mask_ratio", "must lie in (0, 1)"));
        }
        if !(self.mean_span.is_finite() && self.mean_span > 0.0) {
            return Err(Error::config("mean_span", "must be positive"));
        }
        if self.max_span == 0 {
            return Err(Error::config("max_span", "must be at least 1"));
        }
        Ok(())
    }
}

/// Poisson span lengths, redrawn until they land in `[1, max_span]`.
#[derive(Debug, Clone)]
pub struct SpanSampler {
    poisson: Poisson<f64>,
    max_span: usize,
}

impl SpanSampler {
    pub fn new(mean: f64, max_span: usize) -> Result<Self> {
        let poisson = Poisson::new(mean).map_err(|e| Error::config("mean_span", e.to_string()))?;
        Ok(SpanSampler { poisson, max_span })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        loop {
            let len = self.poisson.sample(rng) as usize;
            if (1..=self.max_span).contains(&len) {
                return len;
            }
        }
    }
}

pub fn sentinel(i: usize) -> String {
    format!("[MASK_{i}]")
}

fn sentinel_index(token: &str) -> Option<usize> {
    token
        .strip_prefix("[MASK_")?
        .strip_suffix(']')?
        .parse()
        .ok()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlmExample {
    pub example: PretextExample,
    /// `(start, len)` of each masked span, in order.
    pub spans: Vec<(usize, usize)>,
}

impl MlmExample {
    pub fn masked_tokens(&self) -> usize {
        self.spans.iter().map(|s| s.1).sum()
    }
}

const PLACEMENT_ATTEMPTS: usize = 64;
const MAX_DRAWS: usize = 10_000;

/// Masks about `mask_ratio` of the tokens in non-adjacent spans.
pub fn mlm_example(
    tokens: &[String],
    origin_passage_id: &str,
    cfg: &MlmConfig,
    seed: u64,
) -> Result<MlmExample> {
    cfg.validate()?;
    let n = tokens.len();
    if n < cfg.min_len.max(2) {
        return Err(Error::ChunkTooShort {
            needed: cfg.min_len.max(2),
            got: n,
        });
    }
    let target = ((cfg.mask_ratio * n as f64).round() as usize).max(1);
    let sampler = SpanSampler::new(cfg.mean_span, cfg.max_span.min(n - 1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = vec![false; n];
    let mut spans = Vec::new();
    let mut masked = 0;
    let mut draws = 0;
    while masked < target {
        draws += 1;
        if draws > MAX_DRAWS {
            return Err(Error::ChunkTooShort {
                needed: n + 1,
                got: n,
            });
        }
        let len = sampler.sample(&mut rng);
        for _ in 0..PLACEMENT_ATTEMPTS {
            let start = rng.random_range(0..=n - len);
            // One free token on each side keeps spans from merging.
            let lo = start.saturating_sub(1);
            let hi = (start + len + 1).min(n);
            if used[lo..hi].iter().all(|u| !u) {
                used[start..start + len].iter_mut().for_each(|u| *u = true);
                spans.push((start, len));
                masked += len;
                break;
            }
        }
    }
    spans.sort_unstable();

    let mut query = Vec::with_capacity(n - masked + spans.len());
    let mut output = Vec::with_capacity(masked + spans.len());
    let mut pos = 0;
    for (i, &(start, len)) in spans.iter().enumerate() {
        query.extend_from_slice(&tokens[pos..start]);
        query.push(sentinel(i));
        output.push(sentinel(i));
        output.extend_from_slice(&tokens[start..start + len]);
        pos = start + len;
    }
    query.extend_from_slice(&tokens[pos..]);
    let retrieval_query = query
        .iter()
        .map(|t| {
            if sentinel_index(t).is_some() {
                MASK.to_owned()
            } else {
                t.clone()
            }
        })
        .collect();
    Ok(MlmExample {
        example: PretextExample {
            query,
            output,
            retrieval_query,
            origin_passage_id: origin_passage_id.to_owned(),
            excluded_ids: vec![origin_passage_id.to_owned()],
            task: PretextTask::Mlm,
        },
        spans,
    })
}

/// Writes each output span back into its sentinel slot in the query.
pub fn fill_spans(query: &[String], output: &[String]) -> Result<Vec<String>> {
    let mut fills: Vec<Vec<String>> = Vec::new();
    for token in output {
        match sentinel_index(token) {
            Some(i) if i == fills.len() => fills.push(Vec::new()),
            Some(i) => return Err(Error::Format(format!("sentinel {i} out of order"))),
            None => fills
                .last_mut()
                .ok_or_else(|| Error::Format("output does not start with a sentinel".into()))?
                .push(token.clone()),
        }
    }
    let mut out = Vec::new();
    for token in query {
        match sentinel_index(token) {
            Some(i) => out.extend(
                fills
                    .get(i)
                    .ok_or_else(|| Error::Format(format!("no output span for sentinel {i}")))?
                    .iter()
                    .cloned(),
            ),
            None => out.push(token.clone()),
        }
    }
    Ok(out)
}

pub fn is_excluded_section(title: &str) -> bool {
    EXCLUDED_SECTIONS
        .iter()
        .any(|s| s.eq_ignore_ascii_case(title.trim()))
}

/// Query is `"{article title} ; {section title}"`, output is the section body.
pub fn title_to_section_example(doc: &RawDocument, section: usize) -> Result<PretextExample> {
    let sec = doc.sections.get(section).ok_or_else(|| {
        Error::config(
            "section",
            format!(
                "document {} has {} sections, asked for {section}",
                doc.id,
                doc.sections.len()
            ),
        )
    })?;
    if is_excluded_section(&sec.title) {
        return Err(Error::ExcludedSection(sec.title.clone()));
    }
    let output: Vec<String> = corpus::split_words(&sec.linearized())
        .map(str::to_owned)
        .collect();
    if output.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut query: Vec<String> = corpus::split_words(&doc.title).map(str::to_owned).collect();
    query.push(TITLE_SEPARATOR.to_owned());
    query.extend(corpus::split_words(&sec.title).map(str::to_owned));

    let prefix = format!("{}#{}.", doc.id, section);
    let excluded_ids: Vec<String> = corpus::chunk(doc, corpus::DEFAULT_MAX_WORDS)?
        .into_iter()
        .map(|p| p.id)
        .filter(|id| id.starts_with(&prefix))
        .collect();
    Ok(PretextExample {
        retrieval_query: query.clone(),
        query,
        output,
        origin_passage_id: excluded_ids[0].clone(),
        excluded_ids,
        task: PretextTask::TitleToSection,
    })
}
