//! Joint training loop: retrieve, score with the reader, build a target,
//! update the retriever, and keep the index in step with it.

pub mod cost;
pub mod pretext;

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Passage, PassageStore};
use crate::error::{Error, Result};
use crate::index::{BuildOptions, EmbeddingIndex};
use crate::lm::{Doc, LmScorer};
use crate::losses::{self, LossKind, LossValue};
use crate::retriever::{self, DualEncoder, DualGrad, RetrievalDistribution, TrainMode};

pub use cost::{overhead_full_refresh, overhead_rerank, CostModelParams};
pub use pretext::{PretextExample, PretextTask};

/// How the index is kept consistent with a changing retriever.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexMode {
    /// The retriever is never updated.
    Fixed,
    /// Only the query tower trains, so stored document vectors stay valid.
    QuerySide,
    /// Both towers train; each step re-embeds a top-L pool from the stale index.
    Rerank,
    /// Both towers train; the whole index is re-embedded every R steps.
    FullRefresh,
}

impl IndexMode {
    pub fn train_mode(self) -> TrainMode {
        match self {
            IndexMode::Fixed => TrainMode::Fixed,
            IndexMode::QuerySide => TrainMode::QuerySide,
            IndexMode::Rerank | IndexMode::FullRefresh => TrainMode::Full,
        }
    }
}

impl FromStr for IndexMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(IndexMode::Fixed),
            "query_side" => Ok(IndexMode::QuerySide),
            "rerank" => Ok(IndexMode::Rerank),
            "full_refresh" => Ok(IndexMode::FullRefresh),
            other => Err(Error::config("mode", format!("unknown mode {other:?}"))),
        }
    }
}

impl fmt::Display for IndexMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IndexMode::Fixed => "fixed",
            IndexMode::QuerySide => "query_side",
            IndexMode::Rerank => "rerank",
            IndexMode::FullRefresh => "full_refresh",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshAction {
    None,
    FullRebuild,
    RerankOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Documents retrieved per example; 0 runs closed-book.
    pub k: usize,
    /// Candidate pool re-embedded per example in rerank mode.
    pub rerank_pool: usize,
    /// Steps between full index rebuilds in full-refresh mode.
    pub refresh_interval: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub target_temperature: f64,
    pub loss: LossKind,
    pub mode: IndexMode,
    pub steps: usize,
    pub seed: u64,
    pub lr: f64,
    pub warmup: usize,
    /// Marginalize EMDR² per output token when the reader supports it.
    pub emdr_token_level: bool,
    pub task: PretextTask,
    pub dim: usize,
    pub projection: bool,
    /// Smoothing weight of the overlap reader.
    pub lambda: f64,
    pub shards: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 20,
            rerank_pool: 200,
            refresh_interval: 1000,
            batch_size: 16,
            temperature: retriever::DEFAULT_TEMPERATURE,
            target_temperature: losses::DEFAULT_TARGET_TEMPERATURE,
            loss: LossKind::Pdist,
            mode: IndexMode::QuerySide,
            steps: 200,
            seed: 0,
            lr: 1e-2,
            warmup: 5,
            emdr_token_level: false,
            task: PretextTask::PrefixLm,
            dim: 64,
            projection: false,
            lambda: crate::lm::DEFAULT_LAMBDA,
            shards: 1,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = crate::io::from_toml_config(text, "config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(
                    key,
                    format!("must be positive and finite, got {v}"),
                ))
            }
        };
        positive("temperature", self.temperature)?;
        positive("target_temperature", self.target_temperature)?;
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config("lr", "must be finite and non-negative"));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::config("lambda", "must lie in (0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.dim == 0 {
            return Err(Error::config("dim", "must be at least 1"));
        }
        if self.shards == 0 {
            return Err(Error::config("shards", "must be at least 1"));
        }
        if self.mode == IndexMode::Rerank && self.rerank_pool < self.k {
            return Err(Error::config(
                "rerank_pool",
                "must be at least k in rerank mode",
            ));
        }
        if self.mode == IndexMode::FullRefresh && self.refresh_interval == 0 {
            return Err(Error::config(
                "refresh_interval",
                "must be at least 1 in full_refresh mode",
            ));
        }
        if self.loss == LossKind::Loop && self.k == 1 {
            return Err(Error::config(
                "k",
                "leave-one-out needs at least two documents",
            ));
        }
        Ok(())
    }
}

/// What happens to the index after `step` (1-based) completes.
pub fn refresh_policy(step: usize, cfg: &TrainConfig) -> RefreshAction {
    match cfg.mode {
        IndexMode::FullRefresh
            if cfg.refresh_interval > 0 && step.is_multiple_of(cfg.refresh_interval) =>
        {
            RefreshAction::FullRebuild
        }
        IndexMode::Rerank => RefreshAction::RerankOnly,
        _ => RefreshAction::None,
    }
}

/// Linear warmup over `warmup` steps, then linear decay to zero at `steps`.
/// `step` is 0-based.
pub fn learning_rate(cfg: &TrainConfig, step: usize) -> f64 {
    if step < cfg.warmup {
        return cfg.lr * (step + 1) as f64 / cfg.warmup as f64;
    }
    if cfg.steps <= cfg.warmup {
        return cfg.lr;
    }
    let remaining = cfg.steps.saturating_sub(step) as f64;
    cfg.lr * remaining / (cfg.steps - cfg.warmup) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    /// Reader input.
    pub query: Vec<String>,
    /// Retriever input.
    pub retrieval_query: Vec<String>,
    pub output: Vec<String>,
    /// Passage ids never retrieved for this example.
    #[serde(default)]
    pub exclude: Vec<String>,
    /// Passage known to hold the answer, when there is one.
    #[serde(default)]
    pub gold: Option<String>,
}

impl TrainExample {
    pub fn new(query: Vec<String>, output: Vec<String>) -> Self {
        TrainExample {
            retrieval_query: query.clone(),
            query,
            output,
            exclude: Vec::new(),
            gold: None,
        }
    }
}

impl From<PretextExample> for TrainExample {
    fn from(ex: PretextExample) -> Self {
        TrainExample {
            query: ex.query,
            retrieval_query: ex.retrieval_query,
            output: ex.output,
            exclude: ex.excluded_ids,
            gold: None,
        }
    }
}

/// Builds one pretext example per usable passage, skipping passages too
/// short for the task.
pub fn pretext_examples(
    passages: &[Passage],
    task: PretextTask,
    seed: u64,
) -> Result<Vec<TrainExample>> {
    let mlm = pretext::MlmConfig::default();
    let mut out = Vec::new();
    for (i, p) in passages.iter().enumerate() {
        let ex = match task {
            PretextTask::PrefixLm => pretext::prefix_lm_example(&p.text, &p.id),
            PretextTask::Mlm => {
                pretext::mlm_example(&p.text, &p.id, &mlm, seed.wrapping_add(i as u64))
                    .map(|m| m.example)
            }
            PretextTask::TitleToSection => {
                return Err(Error::config(
                    "task",
                    "title_to_section needs raw documents",
                ));
            }
        };
        match ex {
            Ok(ex) => out.push(ex.into()),
            Err(Error::ChunkTooShort { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// The documents an example is trained against, with scores from the
/// current towers.
#[derive(Debug, Clone)]
pub struct Retrieved<'a> {
    pub passages: Vec<&'a Passage>,
    pub scores: Vec<f64>,
    /// Rerank mode only: a kept document came from the tail of the pool.
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// 1-based.
    pub step: usize,
    /// Mean over the batch of the minimized quantity (KL, or the negative
    /// marginal log-likelihood for EMDR²).
    pub loss: f64,
    /// Share of examples with a known gold passage that ranked it first.
    pub recall_at_1: Option<f64>,
    pub index_version: u64,
    pub action: RefreshAction,
    pub stale_warnings: usize,
}

struct Outcome {
    loss: Option<f64>,
    grad: Option<DualGrad>,
    hit: Option<bool>,
    stale: bool,
}

pub struct Trainer<S: LmScorer> {
    cfg: TrainConfig,
    encoder: DualEncoder,
    store: PassageStore,
    index: EmbeddingIndex,
    scorer: S,
    step: usize,
    stale_warnings: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl<S: LmScorer> Trainer<S> {
    pub fn new(
        cfg: TrainConfig,
        encoder: DualEncoder,
        passages: Vec<Passage>,
        scorer: S,
    ) -> Result<Self> {
        cfg.validate()?;
        let store = PassageStore::new(passages)?;
        let opts = BuildOptions {
            shards: cfg.shards,
            ..BuildOptions::default()
        };
        let index = EmbeddingIndex::build(store.passages(), &encoder, &opts)?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer {
            cfg,
            encoder,
            store,
            index,
            scorer,
            step: 0,
            stale_warnings: 0,
            rng,
            order: Vec::new(),
            cursor: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &DualEncoder {
        &self.encoder
    }

    pub fn into_encoder(self) -> DualEncoder {
        self.encoder
    }

    pub fn index(&self) -> &EmbeddingIndex {
        &self.index
    }

    pub fn store(&self) -> &PassageStore {
        &self.store
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn stale_warnings(&self) -> usize {
        self.stale_warnings
    }

    /// Top-K documents for an example, honoring its exclusions. In rerank
    /// mode a top-L pool is re-embedded with the current document tower
    /// and the K best by fresh score are kept, ties broken by id.
    pub fn retrieve(&self, ex: &TrainExample) -> Result<Retrieved<'_>> {
        let k = self.cfg.k;
        if k == 0 {
            return Ok(Retrieved {
                passages: Vec::new(),
                scores: Vec::new(),
                stale: false,
            });
        }
        let pool = if self.cfg.mode == IndexMode::Rerank {
            self.cfg.rerank_pool
        } else {
            k
        };
        let q = self.encoder.encode_query(&ex.retrieval_query)?;
        let hits = self.index.search_f64(&q, pool + ex.exclude.len())?;
        let candidates: Vec<&Passage> = hits
            .iter()
            .filter(|h| !ex.exclude.contains(&h.id))
            .take(pool)
            .map(|h| {
                self.store
                    .get(&h.id)
                    .ok_or_else(|| Error::Format(format!("index entry {} has no passage", h.id)))
            })
            .collect::<Result<_>>()?;
        let mut scored: Vec<(usize, f64)> = candidates
            .iter()
            .enumerate()
            .map(|(pos, p)| {
                Ok((
                    pos,
                    retriever::score(&q, &self.encoder.encode_doc(&p.text)?)?,
                ))
            })
            .collect::<Result<_>>()?;
        let mut stale = false;
        if self.cfg.mode == IndexMode::Rerank {
            scored.sort_by(|a, b| {
                b.1.total_cmp(&a.1)
                    .then_with(|| candidates[a.0].id.cmp(&candidates[b.0].id))
            });
            scored.truncate(k);
            let tail = candidates.len().saturating_sub(k);
            stale = candidates.len() > k && scored.iter().any(|(pos, _)| *pos >= tail);
        }
        Ok(Retrieved {
            passages: scored.iter().map(|(pos, _)| candidates[*pos]).collect(),
            scores: scored.iter().map(|(_, s)| *s).collect(),
            stale,
        })
    }

    fn loss_value(
        &self,
        ex: &TrainExample,
        docs: &[Doc<'_>],
        retr: &RetrievalDistribution,
    ) -> Result<LossValue> {
        let (q, out) = (&ex.query, &ex.output);
        let tt = self.cfg.target_temperature;
        match self.cfg.loss {
            LossKind::Pdist => {
                let target = losses::pdist_target(&self.scorer.per_doc_loglik(q, docs, out)?, tt)?;
                losses::distill_step(&target, retr)
            }
            LossKind::Adist => {
                let target =
                    losses::adist_target(&self.scorer.attention_relevance(q, docs, out)?, tt)?;
                losses::distill_step(&target, retr)
            }
            LossKind::Loop => {
                let target = losses::loop_target(&self.scorer.loo_logliks(q, docs, out)?, tt)?;
                losses::distill_step(&target, retr)
            }
            LossKind::Emdr2 => {
                if self.cfg.emdr_token_level {
                    if let Some(tokens) = self.scorer.per_doc_token_logliks(q, docs, out)? {
                        return losses::emdr2_token_objective(&tokens, retr);
                    }
                }
                losses::emdr2_objective(&self.scorer.per_doc_loglik(q, docs, out)?, retr)
            }
        }
    }

    fn outcome(&self, ex: &TrainExample) -> Result<Outcome> {
        let retrieved = self.retrieve(ex)?;
        if retrieved.passages.is_empty() {
            return Ok(Outcome {
                loss: None,
                grad: None,
                hit: ex.gold.as_ref().map(|_| false),
                stale: false,
            });
        }
        let docs: Vec<Doc<'_>> = retrieved.passages.iter().map(|p| Doc::from(*p)).collect();
        let ids = retrieved.passages.iter().map(|p| p.id.clone()).collect();
        let retr = RetrievalDistribution::new(ids, retrieved.scores.clone(), self.cfg.temperature)?;
        let lv = self.loss_value(ex, &docs, &retr)?;
        let loss = if self.cfg.loss == LossKind::Emdr2 {
            -lv.value
        } else {
            lv.value
        };
        let grad = match self.cfg.mode {
            IndexMode::Fixed => None,
            mode => {
                let texts: Vec<&[String]> = retrieved
                    .passages
                    .iter()
                    .map(|p| p.text.as_slice())
                    .collect();
                Some(self.encoder.backprop_scores(
                    &ex.retrieval_query,
                    &texts,
                    &lv.grad_wrt_scores,
                    mode.train_mode(),
                )?)
            }
        };
        Ok(Outcome {
            loss: Some(loss),
            grad,
            hit: ex.gold.as_ref().map(|g| &retrieved.passages[0].id == g),
            stale: retrieved.stale,
        })
    }

    /// One optimizer update over `batch`. Examples are scored in parallel;
    /// gradients are summed in batch order so results do not depend on
    /// thread scheduling.
    pub fn train_step(&mut self, batch: &[TrainExample]) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::EmptyInput);
        }
        let outcomes = batch
            .par_iter()
            .map(|ex| self.outcome(ex))
            .collect::<Result<Vec<_>>>()?;

        let scale = 1.0 / batch.len() as f64;
        let mut total = DualGrad::default();
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        let (mut hits, mut judged) = (0usize, 0usize);
        let mut stale = 0;
        for o in &outcomes {
            if let Some(l) = o.loss {
                loss_sum += l;
                loss_n += 1;
            }
            if let Some(g) = &o.grad {
                total.add_scaled(g, scale);
            }
            if let Some(h) = o.hit {
                judged += 1;
                hits += usize::from(h);
            }
            stale += usize::from(o.stale);
        }
        if self.cfg.mode != IndexMode::Fixed {
            self.encoder
                .apply(&total, learning_rate(&self.cfg, self.step));
        }
        self.step += 1;
        self.stale_warnings += stale;
        if stale > 0 {
            log::warn!(
                "step {}: {stale} example(s) kept documents from the tail of the rerank pool",
                self.step
            );
        }
        let action = refresh_policy(self.step, &self.cfg);
        if action == RefreshAction::FullRebuild {
            self.index = self.index.rebuild(self.store.passages(), &self.encoder)?;
        }
        Ok(StepMetrics {
            step: self.step,
            loss: if loss_n == 0 {
                0.0
            } else {
                loss_sum / loss_n as f64
            },
            recall_at_1: (judged > 0).then(|| hits as f64 / judged as f64),
            index_version: self.index.version(),
            action,
            stale_warnings: self.stale_warnings,
        })
    }

    /// Next batch from a seeded shuffle of the example set, reshuffled at
    /// every pass.
    fn next_batch(&mut self, examples: &[TrainExample]) -> Vec<TrainExample> {
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        while batch.len() < self.cfg.batch_size {
            if self.cursor >= self.order.len() {
                self.order = (0..examples.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(examples[self.order[self.cursor]].clone());
            self.cursor += 1;
        }
        batch
    }

    /// Runs `cfg.steps` steps over batches drawn from `examples`.
    pub fn run(&mut self, examples: &[TrainExample]) -> Result<Vec<StepMetrics>> {
        self.run_with(examples, |_| {})
    }

    pub fn run_with(
        &mut self,
        examples: &[TrainExample],
        mut on_step: impl FnMut(&StepMetrics),
    ) -> Result<Vec<StepMetrics>> {
        if examples.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut metrics = Vec::with_capacity(self.cfg.steps);
        while self.step < self.cfg.steps {
            let batch = self.next_batch(examples);
            let m = self.train_step(&batch)?;
            on_step(&m);
            metrics.push(m);
        }
        Ok(metrics)
    }

    /// Share of examples with a gold passage whose top retrieved document
    /// is that passage.
    pub fn recall_at_1(&self, examples: &[TrainExample]) -> Result<f64> {
        let judged: Vec<bool> = examples
            .par_iter()
            .filter(|ex| ex.gold.is_some())
            .map(|ex| {
                let r = self.retrieve(ex)?;
                Ok(r.passages.first().map(|p| &p.id) == ex.gold.as_ref())
            })
            .collect::<Result<_>>()?;
        if judged.is_empty() {
            return Err(Error::InsufficientData(
                "no example has a gold passage".into(),
            ));
        }
        Ok(judged.iter().filter(|h| **h).count() as f64 / judged.len() as f64)
    }
}

/// Trailing mean of `window` losses ending at 1-based `step`.
pub fn moving_average_loss(metrics: &[StepMetrics], step: usize, window: usize) -> Option<f64> {
    if step == 0 || step > metrics.len() || window == 0 {
        return None;
    }
    let lo = step.saturating_sub(window);
    let slice = &metrics[lo..step];
    Some(slice.iter().map(|m| m.loss).sum::<f64>() / slice.len() as f64)
}

pub const METRICS_HEADER: &str = "step,loss,recall_at_1,index_version";

pub fn metrics_csv(metrics: &[StepMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        let recall = m.recall_at_1.map(|r| format!("{r:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{:.9},{},{}\n",
            m.step, m.loss, recall, m.index_version
        ));
    }
    out
}

pub fn write_metrics_csv(path: impl AsRef<Path>, metrics: &[StepMetrics]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(metrics_csv(metrics).as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Largest elementwise `|a - b|`; used to check which tower moved.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
