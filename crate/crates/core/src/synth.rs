//! Seeded synthetic corpora whose correct answers are known by construction.

use std::collections::{BTreeMap, HashMap};

use chrono::NaiveDate;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Passage, Source};
use crate::error::Result;
use crate::evalkit::{ChoiceScorer, ChoiceTask, TemporalQA};
use crate::numeric;
use crate::retriever::Vocab;
use crate::trainer::TrainExample;

/// Each passage mixes topic words shared across the corpus with needle
/// tokens found nowhere else. A query names the passage's topics through
/// alias tokens that never occur in passages, so retrieval has to be
/// learned; the expected output is the passage's needles.
#[derive(Debug, Clone)]
pub struct NeedleConfig {
    pub passages: usize,
    pub topic_vocab: usize,
    pub topic_words: usize,
    pub needle_words: usize,
    pub query_words: usize,
    pub seed: u64,
}

impl Default for NeedleConfig {
    fn default() -> Self {
        NeedleConfig {
            passages: 1000,
            topic_vocab: 200,
            topic_words: 8,
            needle_words: 4,
            query_words: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NeedleTask {
    pub passages: Vec<Passage>,
    pub examples: Vec<TrainExample>,
}

impl NeedleTask {
    /// Passage and query tokens together.
    pub fn vocab(&self) -> Vocab {
        Vocab::build(
            self.passages
                .iter()
                .flat_map(|p| p.text.iter())
                .chain(self.examples.iter().flat_map(|e| e.retrieval_query.iter())),
        )
    }
}

pub fn topic_word(i: usize) -> String {
    format!("w{i}")
}

pub fn alias(word: &str) -> String {
    format!("q:{word}")
}

pub fn needle_task(cfg: &NeedleConfig) -> NeedleTask {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vocab: Vec<String> = (0..cfg.topic_vocab).map(topic_word).collect();
    let mut passages = Vec::with_capacity(cfg.passages);
    let mut examples = Vec::with_capacity(cfg.passages);
    for i in 0..cfg.passages {
        let id = format!("p{i:05}");
        let topics: Vec<String> = vocab
            .choose_multiple(&mut rng, cfg.topic_words)
            .cloned()
            .collect();
        let needles: Vec<String> = (0..cfg.needle_words).map(|j| format!("n{i}_{j}")).collect();
        let mut text: Vec<String> = topics.iter().chain(&needles).cloned().collect();
        text.shuffle(&mut rng);
        let mut query: Vec<String> = topics
            .choose_multiple(&mut rng, cfg.query_words.min(topics.len()))
            .map(|w| alias(w))
            .collect();
        query.shuffle(&mut rng);

        let mut passage = Passage::new(id.clone(), id.clone(), "");
        passage.text = text;
        passages.push(passage);
        examples.push(TrainExample {
            retrieval_query: query.clone(),
            query,
            output: needles,
            exclude: Vec::new(),
            gold: Some(id),
        });
    }
    NeedleTask { passages, examples }
}

/// Scores each option by a fixed value and adds a per-letter bias to the
/// logits before the softmax.
#[derive(Debug, Clone)]
pub struct LetterBiasedScorer {
    pub values: HashMap<String, f64>,
    pub letter_bias: [f64; 4],
}

impl LetterBiasedScorer {
    pub fn unbiased(&self) -> Self {
        LetterBiasedScorer {
            values: self.values.clone(),
            letter_bias: [0.0; 4],
        }
    }
}

impl ChoiceScorer for LetterBiasedScorer {
    fn letter_probs(
        &self,
        _question: &str,
        options: &[String; 4],
        _docs: &[&Passage],
    ) -> Result<[f64; 4]> {
        let logits: Vec<f64> = options
            .iter()
            .zip(self.letter_bias)
            .map(|(o, b)| self.values.get(o).copied().unwrap_or(0.0) + b)
            .collect();
        let p = numeric::softmax(&logits, 1.0)?;
        Ok([p[0], p[1], p[2], p[3]])
    }
}

#[derive(Debug, Clone)]
pub struct ChoiceFixture {
    pub tasks: Vec<ChoiceTask>,
    pub scorer: LetterBiasedScorer,
}

/// Tasks whose gold option carries value 1.0 and every other option a value
/// in [0.1, 0.8]. Letter A gets a bias of 1.5, enough to beat the gold
/// option whenever the gold is not shown under A.
pub fn choice_fixture(tasks: usize, seed: u64) -> ChoiceFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = HashMap::new();
    let mut out = Vec::with_capacity(tasks);
    for i in 0..tasks {
        let gold = rng.random_range(0..4);
        let options = [0, 1, 2, 3].map(|j| format!("t{i}-option{j}"));
        for (j, o) in options.iter().enumerate() {
            let v = if j == gold {
                1.0
            } else {
                rng.random_range(0.1..0.8)
            };
            values.insert(o.clone(), v);
        }
        out.push(ChoiceTask {
            question: format!("question {i}"),
            options,
            gold,
        });
    }
    ChoiceFixture {
        tasks: out,
        scorer: LetterBiasedScorer {
            values,
            letter_bias: [1.5, 0.0, 0.0, 0.0],
        },
    }
}

#[derive(Debug, Clone)]
pub struct TemporalFixture {
    pub early: Vec<Passage>,
    pub late: Vec<Passage>,
    pub dataset: Vec<TemporalQA>,
    pub years: [i32; 2],
}

impl TemporalFixture {
    pub fn vocab(&self) -> Vocab {
        Vocab::build(
            self.early
                .iter()
                .chain(&self.late)
                .flat_map(|p| p.text.iter()),
        )
    }
}

fn dated_passage(id: String, text: &str, date: NaiveDate) -> Passage {
    let mut p = Passage::new(id.clone(), id, text);
    p.source = Source::Wiki;
    p.dump_date = Some(date);
    p
}

/// Two snapshots of the same facts, "s{i} plays for team{j}", where every
/// subject changed team between the snapshots.
pub fn temporal_fixture(subjects: usize, teams: usize, seed: u64) -> TemporalFixture {
    assert!(teams >= 2, "need two teams for answers to change");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let years = [2017, 2020];
    let dates = years.map(|y| NaiveDate::from_ymd_opt(y, 12, 20).expect("valid date"));
    let (mut early, mut late, mut dataset) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..subjects {
        let before = rng.random_range(0..teams);
        let after = (before + rng.random_range(1..teams)) % teams;
        let subject = format!("s{i}");
        early.push(dated_passage(
            format!("{}/{subject}", years[0]),
            &format!("{subject} plays for team{before}"),
            dates[0],
        ));
        late.push(dated_passage(
            format!("{}/{subject}", years[1]),
            &format!("{subject} plays for team{after}"),
            dates[1],
        ));
        dataset.push(TemporalQA {
            query: format!("{subject} plays for"),
            answers_by_year: BTreeMap::from([
                (years[0], format!("team{before}")),
                (years[1], format!("team{after}")),
            ]),
        });
    }
    TemporalFixture {
        early,
        late,
        dataset,
        years,
    }
}

#[derive(Debug, Clone)]
pub struct LeakageQuestion {
    pub tokens: Vec<String>,
    pub answer: String,
    /// Passage holding a verbatim copy of the question, if one was planted.
    pub planted_in: Option<String>,
}

#[derive(Debug, Clone)]
pub struct LeakageFixture {
    pub passages: Vec<Passage>,
    pub questions: Vec<LeakageQuestion>,
}

/// Random-word passages, a tenth of which carry a verbatim question
/// followed by its answer. Another tenth carry a run of fewer than half of
/// some question's tokens.
pub fn leakage_fixture(passages: usize, question_len: usize, seed: u64) -> LeakageFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab: Vec<String> = (0..500).map(|i| format!("v{i}")).collect();
    let words = |rng: &mut ChaCha8Rng, n: usize| -> Vec<String> {
        (0..n)
            .map(|_| vocab.choose(rng).expect("nonempty").clone())
            .collect()
    };
    let planted = passages / 10;
    let mut questions: Vec<LeakageQuestion> = (0..2 * planted)
        .map(|i| LeakageQuestion {
            tokens: words(&mut rng, question_len),
            answer: format!("answer{i}"),
            planted_in: None,
        })
        .collect();
    let mut out = Vec::with_capacity(passages);
    for i in 0..passages {
        let id = format!("leak{i:05}");
        let mut text = words(&mut rng, 30);
        if i < planted {
            let q = &mut questions[i];
            let at = rng.random_range(0..=text.len());
            let mut insert = q.tokens.clone();
            insert.push(q.answer.clone());
            text.splice(at..at, insert);
            q.planted_in = Some(id.clone());
        } else if i < 2 * planted && question_len >= 3 {
            let q = &questions[rng.random_range(0..questions.len())];
            let len = rng.random_range(1..=(question_len - 1) / 2);
            let start = rng.random_range(0..=question_len - len);
            let at = rng.random_range(0..=text.len());
            text.splice(at..at, q.tokens[start..start + len].iter().cloned());
        }
        let mut p = Passage::new(id.clone(), id, "");
        p.text = text;
        out.push(p);
    }
    LeakageFixture {
        passages: out,
        questions,
    }
}
