use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::trace::{SegmentedTrace, TraceSource};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

/// One line of a trace dataset. Text is stored raw and tokenized on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub question: String,
    pub solution: String,
    pub think: String,
    pub source: TraceSource,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl TraceRecord {
    pub fn from_trace(vocab: &Vocabulary, trace: &SegmentedTrace, meta: serde_json::Value) -> Self {
        Self {
            question: vocab.detokenize(&trace.question),
            solution: vocab.detokenize(&trace.solution),
            think: vocab.detokenize(&trace.think),
            source: trace.source,
            meta,
        }
    }

    pub fn to_trace(&self, vocab: &Vocabulary) -> Result<SegmentedTrace> {
        Ok(SegmentedTrace::new(
            &vocab.tokenize_nonempty(&self.question)?,
            &vocab.tokenize_nonempty(&self.solution)?,
            &vocab.tokenize(&self.think)?,
            self.source,
        ))
    }
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (i, row) in rows.iter().enumerate() {
        serde_json::to_writer(&mut w, row).map_err(|source| Error::Json {
            path: path.into(),
            line: i + 1,
            source,
        })?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| Error::Json {
            path: path.into(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}
