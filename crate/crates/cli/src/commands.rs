use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use ralab::corpus::{self, FilterConfig, Passage, PassageStore};
use ralab::evalkit::leakage::{filtered_rerun, leakage_audit, RerunReport};
use ralab::evalkit::metrics::max_over_golds;
use ralab::evalkit::{
    debias_infer, exact_match, f1, temporal_swap_eval, ChoiceTask, DatedIndex, OverlapAnswerer,
    QaAnswerer, QaTask, ReaderChoiceScorer, TemporalQA,
};
use ralab::index::{compress, train_pq, BuildOptions, EmbeddingIndex, MemoryReport, StoredIndex};
use ralab::io::read_jsonl;
use ralab::lm::{LmScorer, OverlapLm, TableScorer};
use ralab::retriever::{DualEncoder, Vocab};
use ralab::trainer::cost::{approx_percent, parse_decimal, to_f64, Exact};
use ralab::trainer::{
    metrics_csv, overhead_full_refresh, overhead_rerank, pretext_examples, CostModelParams,
    TrainConfig, TrainExample, Trainer,
};

use crate::manifest::{beside, RunManifest};
use crate::{
    BuildIndexArgs, CompressArgs, CostArgs, EvaluateArgs, IngestArgs, SearchArgs, SwapArgs,
    TrainArgs,
};

/// A request that cannot be served as given; exits with the usage code.
#[derive(Debug)]
pub struct Usage {
    pub key: &'static str,
    pub reason: String,
}

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid `{}`: {}", self.key, self.reason)
    }
}

impl std::error::Error for Usage {}

fn usage(key: &'static str, reason: impl Into<String>) -> anyhow::Error {
    Usage {
        key,
        reason: reason.into(),
    }
    .into()
}

/// 2 for configuration and usage errors, 1 for everything else (chiefly I/O).
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<ralab::Error>() {
            return match e {
                ralab::Error::InvalidConfig { .. } | ralab::Error::InvalidTemperature(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn load_passages(path: &Path) -> Result<Vec<Passage>> {
    corpus::read_passages(path).with_context(|| format!("reading passages from {}", path.display()))
}

fn load_encoder(path: &Path) -> Result<DualEncoder> {
    DualEncoder::load(path).with_context(|| format!("reading encoder {}", path.display()))
}

fn load_index(path: &Path) -> Result<StoredIndex> {
    StoredIndex::load(path).with_context(|| format!("reading index {}", path.display()))
}

fn words(text: &str) -> Vec<String> {
    corpus::split_words(text).map(str::to_owned).collect()
}

fn query_vector(encoder: &DualEncoder, text: &str) -> Result<Vec<f32>> {
    Ok(encoder
        .encode_query(&words(text))?
        .into_iter()
        .map(|x| x as f32)
        .collect())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn ingest(args: IngestArgs) -> Result<()> {
    let mut manifest = RunManifest::new("ingest", &args)?;
    manifest.hash_input(&args.input)?;
    let filter = match &args.filter_config {
        Some(path) => {
            manifest.hash_input(path)?;
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Some(FilterConfig::from_toml_str(&text)?)
        }
        None => None,
    };
    let docs = manifest.timed("read", || {
        corpus::read_documents(&args.input)
            .with_context(|| format!("reading {}", args.input.display()))
    })?;
    let report = manifest.timed("chunk", || {
        Ok(corpus::ingest(&docs, args.max_words, filter.as_ref())?)
    })?;
    manifest.timed("write", || {
        corpus::write_passages(&args.out, &report.passages)
            .with_context(|| format!("writing {}", args.out.display()))
    })?;
    manifest.write(&beside(&args.out))?;
    println!(
        "kept {} document(s), dropped {}, wrote {} passage(s) to {}",
        report.documents_kept,
        report.documents_dropped,
        report.passages.len(),
        args.out.display()
    );
    Ok(())
}

pub fn build_index(args: BuildIndexArgs) -> Result<()> {
    let mut manifest = RunManifest::new("build-index", &args)?;
    manifest.seed = Some(args.seed);
    manifest.hash_input(&args.corpus)?;
    let passages = load_passages(&args.corpus)?;
    let encoder = match &args.encoder {
        Some(path) => {
            manifest.hash_input(path)?;
            load_encoder(path)?
        }
        None => {
            let vocab = Vocab::build(passages.iter().flat_map(|p| p.text.iter()));
            let enc = DualEncoder::init(vocab, args.dim, args.projection, args.seed)?;
            let mut path = args.out.as_os_str().to_owned();
            path.push(".encoder");
            enc.save(&path)?;
            println!(
                "initialized encoder saved to {}",
                Path::new(&path).display()
            );
            enc
        }
    };
    let opts = BuildOptions {
        shards: args.shards,
        precision: args.precision,
        dump_date: args.dump_date,
    };
    let index = manifest.timed("embed", || {
        Ok(EmbeddingIndex::build(&passages, &encoder, &opts)?)
    })?;
    manifest.index_version = Some(index.version());
    let stored = StoredIndex::Exact(index);
    manifest.timed("write", || Ok(stored.save(&args.out)?))?;
    manifest.write(&beside(&args.out))?;
    println!(
        "indexed {} passage(s), dim {}, {} -> {}",
        stored.len(),
        stored.dim(),
        args.precision,
        args.out.display()
    );
    Ok(())
}

pub fn compress_index(args: CompressArgs) -> Result<()> {
    let mut manifest = RunManifest::new("compress-index", &args)?;
    manifest.seed = Some(args.seed);
    manifest.hash_input(&args.index)?;
    let StoredIndex::Exact(index) = load_index(&args.index)? else {
        bail!(usage("index", "already product-quantized"));
    };
    let training = manifest.timed("kmeans", || {
        Ok(train_pq(
            &index,
            args.m,
            args.kc,
            args.iterations,
            args.seed,
        )?)
    })?;
    let pq = compress(&index, &training.codec)?;
    manifest.index_version = Some(pq.version());
    let stored = StoredIndex::Pq(pq);
    manifest.timed("write", || Ok(stored.save(&args.out)?))?;
    manifest.write(&beside(&args.out))?;

    let report = MemoryReport::for_pq(
        index.len() as u64,
        index.dim() as u64,
        index.precision().bytes_per_scalar(),
        args.m as u64,
        args.kc as u64,
        index.precision().bytes_per_scalar(),
    );
    println!(
        "compressed {} vector(s): {} -> {} bytes (ratio {:.2}), final k-means objective {:.6}",
        index.len(),
        report.uncompressed_bytes,
        report.compressed_bytes,
        report.ratio(),
        training.objective.last().copied().unwrap_or(0.0)
    );
    Ok(())
}

pub fn search(args: SearchArgs) -> Result<()> {
    let index = load_index(&args.index)?;
    let encoder = load_encoder(&args.encoder)?;
    let store = match &args.corpus {
        Some(path) => Some(PassageStore::new(load_passages(path)?)?),
        None => None,
    };
    for (qi, query) in args.queries.iter().enumerate() {
        let hits = index.search(&query_vector(&encoder, query)?, args.k)?;
        for (rank, hit) in hits.iter().enumerate() {
            let text = store
                .as_ref()
                .and_then(|s| s.get(&hit.id))
                .map(|p| format!("\t{}", p.text.join(" ")))
                .unwrap_or_default();
            println!("{qi}\t{}\t{}\t{:.6}{text}", rank + 1, hit.id, hit.score);
        }
    }
    Ok(())
}

fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    macro_rules! overlay {
        ($($field:ident),*) => {
            $(if let Some(v) = args.$field.clone() { cfg.$field = v; })*
        };
    }
    overlay!(
        k,
        rerank_pool,
        refresh_interval,
        batch_size,
        temperature,
        target_temperature,
        loss,
        mode,
        steps,
        seed,
        lr,
        warmup,
        task,
        dim,
        lambda,
        shards
    );
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(&args)?;
    let mut manifest = RunManifest::new("train", &cfg)?;
    manifest.seed = Some(cfg.seed);
    manifest.hash_input(&args.corpus)?;
    for path in [&args.config, &args.examples, &args.scores, &args.encoder]
        .into_iter()
        .flatten()
    {
        manifest.hash_input(path)?;
    }
    ensure_dir(&args.out)?;

    let passages = load_passages(&args.corpus)?;
    let examples: Vec<TrainExample> = match &args.examples {
        Some(path) => read_jsonl(path).with_context(|| format!("reading {}", path.display()))?,
        None => pretext_examples(&passages, cfg.task, cfg.seed)?,
    };
    if examples.is_empty() {
        bail!(usage("corpus", "no training examples could be built"));
    }
    let encoder = match &args.encoder {
        Some(path) => load_encoder(path)?,
        None => {
            let vocab = Vocab::build(
                passages
                    .iter()
                    .flat_map(|p| p.text.iter())
                    .chain(examples.iter().flat_map(|e| e.retrieval_query.iter())),
            );
            DualEncoder::init(vocab, cfg.dim, cfg.projection, cfg.seed)?
        }
    };
    match &args.scores {
        Some(path) => {
            let reader = TableScorer::from_jsonl(path)?;
            run_training(
                cfg, encoder, passages, reader, &examples, &args.out, manifest,
            )
        }
        None => {
            let reader = OverlapLm::new(encoder.vocab().len(), cfg.lambda)?;
            run_training(
                cfg, encoder, passages, reader, &examples, &args.out, manifest,
            )
        }
    }
}

fn run_training<S: LmScorer>(
    cfg: TrainConfig,
    encoder: DualEncoder,
    passages: Vec<Passage>,
    reader: S,
    examples: &[TrainExample],
    out: &Path,
    mut manifest: RunManifest,
) -> Result<()> {
    fs::write(out.join("config.toml"), cfg.to_toml_string())?;
    let steps = cfg.steps;
    let mut trainer = manifest.timed("index", || {
        Ok(Trainer::new(cfg, encoder, passages, reader)?)
    })?;
    let has_gold = examples.iter().any(|e| e.gold.is_some());
    let before = if has_gold {
        Some(trainer.recall_at_1(examples)?)
    } else {
        None
    };
    let every = (steps / 10).max(1);
    let metrics = manifest.timed("train", || {
        Ok(trainer.run_with(examples, |m| {
            if m.step % every == 0 {
                log::info!(
                    "step {} loss {:.6} index v{}",
                    m.step,
                    m.loss,
                    m.index_version
                );
            }
        })?)
    })?;
    let after = if has_gold {
        Some(trainer.recall_at_1(examples)?)
    } else {
        None
    };

    fs::write(out.join("metrics.csv"), metrics_csv(&metrics))?;
    manifest.index_version = Some(trainer.index().version());
    StoredIndex::Exact(trainer.index().clone()).save(out.join("index.ridx"))?;
    trainer.encoder().save(out.join("encoder.bin"))?;
    manifest.write(&out.join("manifest.json"))?;

    let last = metrics.last().map(|m| m.loss).unwrap_or(f64::NAN);
    print!(
        "trained {steps} step(s), final loss {last:.6}, index version {}",
        trainer.index().version()
    );
    if let (Some(b), Some(a)) = (before, after) {
        print!(", recall@1 {b:.3} -> {a:.3}");
    }
    if trainer.stale_warnings() > 0 {
        print!(", {} stale-index warning(s)", trainer.stale_warnings());
    }
    println!();
    Ok(())
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum EvalTask {
    Choice(ChoiceTask),
    Qa(QaTask),
}

impl EvalTask {
    fn question(&self) -> &str {
        match self {
            EvalTask::Choice(t) => &t.question,
            EvalTask::Qa(t) => &t.question,
        }
    }
}

#[derive(Debug, Serialize)]
struct Rerun {
    original: f64,
    filtered: f64,
    delta: f64,
}

impl From<RerunReport> for Rerun {
    fn from(r: RerunReport) -> Self {
        Rerun {
            original: r.original,
            filtered: r.filtered,
            delta: r.delta,
        }
    }
}

#[derive(Debug, Default, Serialize)]
struct EvalReport {
    choice_tasks: usize,
    choice_accuracy: Option<f64>,
    qa_tasks: usize,
    exact_match: Option<f64>,
    f1: Option<f64>,
    flagged_examples: Option<usize>,
    flagged_passages: Option<usize>,
    choice_rerun: Option<Rerun>,
    qa_rerun: Option<Rerun>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let mut manifest = RunManifest::new("evaluate", &args)?;
    for path in [&args.task, &args.index, &args.encoder, &args.corpus] {
        manifest.hash_input(path)?;
    }
    let tasks: Vec<EvalTask> =
        read_jsonl(&args.task).with_context(|| format!("reading {}", args.task.display()))?;
    let index = load_index(&args.index)?;
    manifest.index_version = Some(index.version());
    let encoder = load_encoder(&args.encoder)?;
    let store = PassageStore::new(load_passages(&args.corpus)?)?;
    let scorer = ReaderChoiceScorer {
        reader: OverlapLm::new(encoder.vocab().len(), args.lambda)?,
    };

    let retrieved: Vec<Vec<&Passage>> = manifest.timed("retrieve", || {
        tasks
            .par_iter()
            .map(|t| {
                let hits = index.search(&query_vector(&encoder, t.question())?, args.k)?;
                hits.iter()
                    .map(|h| {
                        store.get(&h.id).ok_or_else(|| {
                            usage("corpus", format!("passage {} is not in the corpus", h.id))
                        })
                    })
                    .collect()
            })
            .collect()
    })?;

    let choice_score = |t: &ChoiceTask, docs: &[&Passage]| -> Result<f64> {
        let r = debias_infer(t, docs, &scorer, args.mode)?;
        Ok(f64::from(u8::from(r.prediction == t.gold)))
    };
    let qa_scores = |t: &QaTask, docs: &[&Passage]| -> Result<(f64, f64)> {
        let answer = OverlapAnswerer.answer(&words(&t.question), docs)?;
        Ok((
            max_over_golds(exact_match, &answer, &t.answers),
            max_over_golds(f1, &answer, &t.answers),
        ))
    };

    let mut report = EvalReport::default();
    let (mut acc, mut em, mut f) = (Vec::new(), Vec::new(), Vec::new());
    manifest.timed("score", || {
        for (task, docs) in tasks.iter().zip(&retrieved) {
            match task {
                EvalTask::Choice(t) => acc.push(choice_score(t, docs)?),
                EvalTask::Qa(t) => {
                    let (e, f1) = qa_scores(t, docs)?;
                    em.push(e);
                    f.push(f1);
                }
            }
        }
        Ok(())
    })?;
    report.choice_tasks = acc.len();
    report.choice_accuracy = mean(&acc);
    report.qa_tasks = em.len();
    report.exact_match = mean(&em);
    report.f1 = mean(&f);

    if args.audit_leakage {
        let mut choice = Vec::new();
        let mut qa = Vec::new();
        let (mut flagged_examples, mut flagged_passages) = (0, 0);
        for (task, docs) in tasks.iter().zip(&retrieved) {
            let texts: Vec<&[String]> = docs.iter().map(|p| p.text.as_slice()).collect();
            let flags = leakage_audit(&words(task.question()), &texts)?.passage_flags();
            let n = flags.iter().filter(|f| **f).count();
            flagged_passages += n;
            flagged_examples += usize::from(n > 0);
            let pairs: Vec<(&Passage, bool)> = docs.iter().copied().zip(flags).collect();
            match task {
                EvalTask::Choice(t) => choice.push((t, pairs)),
                EvalTask::Qa(t) => qa.push((t, pairs)),
            }
        }
        // Scoring already succeeded on these inputs, so a failure here would
        // only come from an emptied retrieval set, which scores as wrong.
        let choice_rerun = filtered_rerun(&choice, |t, docs| {
            let docs: Vec<&Passage> = docs.iter().map(|p| **p).collect();
            choice_score(t, &docs).unwrap_or(0.0)
        });
        let qa_rerun = filtered_rerun(&qa, |t, docs| {
            let docs: Vec<&Passage> = docs.iter().map(|p| **p).collect();
            qa_scores(t, &docs).map(|s| s.0).unwrap_or(0.0)
        });
        report.flagged_examples = Some(flagged_examples);
        report.flagged_passages = Some(flagged_passages);
        report.choice_rerun = (!choice.is_empty()).then(|| choice_rerun.into());
        report.qa_rerun = (!qa.is_empty()).then(|| qa_rerun.into());
    }

    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(dir) = &args.out {
        ensure_dir(dir)?;
        fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(&report)? + "\n",
        )?;
        manifest.write(&dir.join("manifest.json"))?;
    }
    Ok(())
}

pub fn swap_index(args: SwapArgs) -> Result<()> {
    let mut manifest = RunManifest::new("swap-index", &args)?;
    for path in [&args.from, &args.to, &args.task, &args.encoder]
        .into_iter()
        .chain(&args.corpora)
    {
        manifest.hash_input(path)?;
    }
    let exact = |key: &'static str, path: &Path| -> Result<EmbeddingIndex> {
        match load_index(path)? {
            StoredIndex::Exact(i) => Ok(i),
            StoredIndex::Pq(_) => Err(usage(key, "the swap needs exact indices")),
        }
    };
    let (from, to) = (exact("from", &args.from)?, exact("to", &args.to)?);
    let encoder = load_encoder(&args.encoder)?;
    let mut passages = Vec::new();
    for path in &args.corpora {
        passages.extend(load_passages(path)?);
    }
    let store = PassageStore::new(passages)?;
    let dataset: Vec<TemporalQA> =
        read_jsonl(&args.task).with_context(|| format!("reading {}", args.task.display()))?;
    let matrix = manifest.timed("evaluate", || {
        Ok(temporal_swap_eval(
            &dataset,
            &encoder,
            DatedIndex {
                index: &from,
                passages: &store,
            },
            DatedIndex {
                index: &to,
                passages: &store,
            },
            &OverlapAnswerer,
            args.k,
        )?)
    })?;
    println!("answers\\index\t{}\t{}", matrix.years[0], matrix.years[1]);
    for (t, row) in matrix.accuracy.iter().enumerate() {
        println!("{}\t{:.4}\t{:.4}", matrix.years[t], row[0], row[1]);
    }
    println!("{} question(s)", matrix.examples);
    if let Some(dir) = &args.out {
        ensure_dir(dir)?;
        fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(&matrix)? + "\n",
        )?;
        manifest.write(&dir.join("manifest.json"))?;
    }
    Ok(())
}

fn print_overhead(name: &str, formula: &str, r: &Exact) {
    println!(
        "{name}\t{formula}\t{r}\t{:.3}\t{}",
        to_f64(r),
        approx_percent(r)
    );
}

pub fn cost_model(args: CostArgs) -> Result<()> {
    let (p_retr, p_lm) = match (&args.ratio, args.pretr, args.plm) {
        (Some(ratio), None, None) => {
            let r = parse_decimal(ratio)?;
            (*r.numer(), *r.denom())
        }
        (None, Some(pretr), Some(plm)) => (pretr, plm),
        _ => bail!(usage(
            "ratio",
            "give either --ratio or both --pretr and --plm"
        )),
    };
    let params = CostModelParams {
        n: args.n,
        b: args.b,
        k: args.k,
        r: args.r,
        l: args.l.unwrap_or(1),
        p_retr,
        p_lm,
    };
    print_overhead(
        "full_refresh",
        "N*Pretr/(4*B*K*Plm*R)",
        &overhead_full_refresh(&params)?,
    );
    if args.l.is_some() {
        print_overhead("rerank", "L*Pretr/(4*K*Plm)", &overhead_rerank(&params)?);
    }
    Ok(())
}
