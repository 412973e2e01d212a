//! JSON-lines and config-file helpers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Deserializes flat `key = value` TOML. On failure the error names the
/// offending key: the unknown field itself, or the key on the line where
/// parsing failed.
pub fn from_toml_config<T: DeserializeOwned>(text: &str, fallback_key: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| {
        let message = e.message().trim().to_owned();
        let quoted = message
            .split('`')
            .nth(1)
            .filter(|_| message.contains("field"));
        let from_line = e.span().and_then(|span| {
            let line_start = text[..span.start].rfind('\n').map_or(0, |i| i + 1);
            let line = text[line_start..].lines().next()?;
            let key = line.split_once('=')?.0.trim().trim_matches('"');
            (!key.is_empty()).then(|| key.to_owned())
        });
        let key = quoted
            .map(str::to_owned)
            .or(from_line)
            .unwrap_or_else(|| fallback_key.to_owned());
        Error::config(key, message)
    })
}
