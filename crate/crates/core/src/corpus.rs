//! Document ingestion: structured-entry linearization, section chunking,
//! quality filtering and self-passage exclusion.

use std::borrow::Borrow;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const DEFAULT_MAX_WORDS: usize = 200;

/// Separator placed between linearized list, table and infobox entries.
pub const ENTRY_SEPARATOR: &str = "; ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Wiki,
    Cc,
    Infobox,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Wiki => "wiki",
            Source::Cc => "cc",
            Source::Infobox => "infobox",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub text: String,
    /// List, table or infobox entries; linearized into the section text.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub entries: Vec<String>,
}

impl Section {
    pub fn new(title: impl Into<String>, text: impl Into<String>) -> Self {
        Section {
            title: title.into(),
            text: text.into(),
            entries: Vec::new(),
        }
    }

    /// The section body as flat text: running text followed by its entries.
    pub fn linearized(&self) -> String {
        let mut parts: Vec<&str> = Vec::with_capacity(self.entries.len() + 1);
        if !self.text.trim().is_empty() {
            parts.push(self.text.trim());
        }
        parts.extend(
            self.entries
                .iter()
                .map(|e| e.trim())
                .filter(|e| !e.is_empty()),
        );
        parts.join(ENTRY_SEPARATOR)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDocument {
    pub id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub sections: Vec<Section>,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dump_date: Option<NaiveDate>,
}

impl RawDocument {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::InvalidDocument {
                id: String::new(),
                reason: "empty id".into(),
            });
        }
        if self.source == Source::Wiki && self.dump_date.is_none() {
            return Err(Error::InvalidDocument {
                id: self.id.clone(),
                reason: "wiki documents require a dump_date".into(),
            });
        }
        Ok(())
    }

    fn words(&self) -> Vec<String> {
        self.sections
            .iter()
            .flat_map(|s| {
                split_words(&s.linearized())
                    .map(str::to_owned)
                    .collect::<Vec<_>>()
            })
            .collect()
    }
}

/// A chunk of at most `max_words` words drawn from one document section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub doc_id: String,
    #[serde(with = "token_text")]
    pub text: Vec<String>,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dump_date: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub section_title: String,
}

impl Passage {
    pub fn new(id: impl Into<String>, doc_id: impl Into<String>, text: &str) -> Self {
        Passage {
            id: id.into(),
            doc_id: doc_id.into(),
            text: split_words(text).map(str::to_owned).collect(),
            source: Source::Cc,
            dump_date: None,
            section_title: String::new(),
        }
    }

    pub fn word_count(&self) -> usize {
        self.text.len()
    }
}

/// Tokens are serialized as one space-joined string.
mod token_text {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(tokens: &[String], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&tokens.join(" "))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
        let text = String::deserialize(d)?;
        Ok(super::split_words(&text).map(str::to_owned).collect())
    }
}

/// A word is a maximal run of non-whitespace characters.
pub fn split_words(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

/// Joins structured entries with `"; "`, skipping empty ones.
pub fn linearize_entries<S: AsRef<str>>(entries: &[S]) -> String {
    entries
        .iter()
        .map(|e| e.as_ref().trim())
        .filter(|e| !e.is_empty())
        .collect::<Vec<_>>()
        .join(ENTRY_SEPARATOR)
}

/// Flattens every section of a document, entries included, into one text.
pub fn linearize_structured(doc: &RawDocument) -> String {
    let sections: Vec<String> = doc.sections.iter().map(Section::linearized).collect();
    linearize_entries(&sections)
}

/// Sizes of a balanced split of `total` items into `ceil(total / max)` parts.
pub fn balanced_sizes(total: usize, max: usize) -> Vec<usize> {
    if total == 0 {
        return Vec::new();
    }
    let parts = total.div_ceil(max);
    balanced_partition(total, parts)
}

/// Sizes of `parts` contiguous groups covering `total` items, the first
/// `total % parts` of them one larger.
pub fn balanced_partition(total: usize, parts: usize) -> Vec<usize> {
    let base = total / parts;
    let extra = total % parts;
    (0..parts).map(|i| base + usize::from(i < extra)).collect()
}

/// Splits a document into passages, one section at a time. Structured
/// entries are linearized before splitting.
pub fn chunk(doc: &RawDocument, max_words: usize) -> Result<Vec<Passage>> {
    if max_words == 0 {
        return Err(Error::config("max_words", "must be at least 1"));
    }
    let mut passages = Vec::new();
    for (section_idx, section) in doc.sections.iter().enumerate() {
        let body = section.linearized();
        let words: Vec<&str> = split_words(&body).collect();
        let mut start = 0;
        for (chunk_idx, size) in balanced_sizes(words.len(), max_words)
            .into_iter()
            .enumerate()
        {
            passages.push(Passage {
                id: format!("{}#{}.{}", doc.id, section_idx, chunk_idx),
                doc_id: doc.id.clone(),
                text: words[start..start + size]
                    .iter()
                    .map(|w| (*w).to_owned())
                    .collect(),
                source: doc.source,
                dump_date: doc.dump_date,
                section_title: section.title.clone(),
            });
            start += size;
        }
    }
    Ok(passages)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub min_doc_length: usize,
    pub max_mean_word_length: f64,
    pub min_alnum_ratio: f64,
    pub max_repeated_token_ratio: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_doc_length: 50,
            max_mean_word_length: 10.0,
            min_alnum_ratio: 0.6,
            max_repeated_token_ratio: 0.5,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.max_mean_word_length.is_finite() {
            return Err(Error::config("max_mean_word_length", "must be finite"));
        }
        for (key, v) in [
            ("min_alnum_ratio", self.min_alnum_ratio),
            ("max_repeated_token_ratio", self.max_repeated_token_ratio),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(key, "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: FilterConfig = io::from_toml_config(text, "filter-config")?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromStr for FilterConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_toml_str(s)
    }
}

/// The four statistics the quality filter thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DocumentStats {
    pub word_count: usize,
    pub mean_word_length: f64,
    /// Alphanumeric characters over non-whitespace characters.
    pub alnum_ratio: f64,
    /// `1 - distinct / total` over word tokens.
    pub repeated_token_ratio: f64,
}

impl DocumentStats {
    pub fn of_words<S: AsRef<str>>(words: &[S]) -> Self {
        if words.is_empty() {
            return DocumentStats {
                word_count: 0,
                mean_word_length: 0.0,
                alnum_ratio: 0.0,
                repeated_token_ratio: 0.0,
            };
        }
        let mut chars = 0usize;
        let mut alnum = 0usize;
        for w in words {
            for c in w.as_ref().chars() {
                chars += 1;
                if c.is_alphanumeric() {
                    alnum += 1;
                }
            }
        }
        let distinct: HashSet<&str> = words.iter().map(AsRef::as_ref).collect();
        DocumentStats {
            word_count: words.len(),
            mean_word_length: chars as f64 / words.len() as f64,
            alnum_ratio: alnum as f64 / chars as f64,
            repeated_token_ratio: 1.0 - distinct.len() as f64 / words.len() as f64,
        }
    }

    pub fn of_document(doc: &RawDocument) -> Self {
        Self::of_words(&doc.words())
    }

    pub fn passes(&self, cfg: &FilterConfig) -> bool {
        self.word_count > 0
            && self.word_count >= cfg.min_doc_length
            && self.mean_word_length <= cfg.max_mean_word_length
            && self.alnum_ratio >= cfg.min_alnum_ratio
            && self.repeated_token_ratio <= cfg.max_repeated_token_ratio
    }
}

pub fn quality_filter(doc: &RawDocument, cfg: &FilterConfig) -> bool {
    DocumentStats::of_document(doc).passes(cfg)
}

/// Drops every result sharing the origin's id, preserving order.
pub fn exclude_self<T: Borrow<Passage>>(results: Vec<T>, origin: &Passage) -> Vec<T> {
    results
        .into_iter()
        .filter(|p| p.borrow().id != origin.id)
        .collect()
}

/// Passages addressable by id.
#[derive(Debug, Clone, Default)]
pub struct PassageStore {
    passages: Vec<Passage>,
    by_id: HashMap<String, usize>,
}

impl PassageStore {
    pub fn new(passages: Vec<Passage>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            if by_id.insert(p.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(p.id.clone()));
            }
        }
        Ok(PassageStore { passages, by_id })
    }

    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.by_id.get(id).map(|&i| &self.passages[i])
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    /// Every distinct token, for building a vocabulary.
    pub fn tokens(&self) -> impl Iterator<Item = &String> {
        self.passages.iter().flat_map(|p| p.text.iter())
    }
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub passages: Vec<Passage>,
    pub documents_kept: usize,
    pub documents_dropped: usize,
}

/// Validates, filters and chunks a corpus. Documents are processed in
/// parallel; output order follows input order.
pub fn ingest(
    docs: &[RawDocument],
    max_words: usize,
    filter: Option<&FilterConfig>,
) -> Result<IngestReport> {
    let mut seen = HashSet::new();
    for doc in docs {
        doc.validate()?;
        if !seen.insert(doc.id.as_str()) {
            return Err(Error::DuplicateId(doc.id.clone()));
        }
    }
    if let Some(cfg) = filter {
        cfg.validate()?;
    }
    let chunked: Vec<Option<Vec<Passage>>> = docs
        .par_iter()
        .map(|doc| match filter {
            Some(cfg) if !quality_filter(doc, cfg) => Ok(None),
            _ => chunk(doc, max_words).map(Some),
        })
        .collect::<Result<_>>()?;
    let mut report = IngestReport::default();
    for passages in chunked {
        match passages {
            Some(p) => {
                report.documents_kept += 1;
                report.passages.extend(p);
            }
            None => report.documents_dropped += 1,
        }
    }
    Ok(report)
}

pub fn read_documents(path: impl AsRef<Path>) -> Result<Vec<RawDocument>> {
    io::read_jsonl(path)
}

pub fn read_passages(path: impl AsRef<Path>) -> Result<Vec<Passage>> {
    io::read_jsonl(path)
}

pub fn write_passages(path: impl AsRef<Path>, passages: &[Passage]) -> Result<()> {
    io::write_jsonl(path, passages)
}
