//! Line-delimited JSON records: one document per line with fields
//! `text`, `facts` and `qa`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusEntry, Fact, FactDoc, QAPair, QASet};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocRecord {
    pub text: String,
    #[serde(default)]
    pub facts: Vec<Fact>,
    #[serde(default)]
    pub qa: Vec<QAPair>,
    #[serde(default)]
    pub filler_seed: u64,
    /// Hash of the configuration that produced the record, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl From<&CorpusEntry> for DocRecord {
    fn from(e: &CorpusEntry) -> Self {
        DocRecord {
            text: e.doc.text.clone(),
            facts: e.doc.facts.clone(),
            qa: e.qas.pairs.clone(),
            filler_seed: e.doc.filler_seed,
            config_hash: None,
        }
    }
}

impl From<DocRecord> for CorpusEntry {
    fn from(r: DocRecord) -> Self {
        let target_len = r.text.len();
        CorpusEntry {
            doc: FactDoc {
                text: r.text,
                facts: r.facts,
                filler_seed: r.filler_seed,
                target_len,
            },
            qas: QASet::new(r.qa),
        }
    }
}

/// Serializes values as JSON lines, each terminated by `\n`.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let text = to_jsonl(items)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, entries: &[CorpusEntry]) -> Result<()> {
    let records: Vec<DocRecord> = entries.iter().map(DocRecord::from).collect();
    write_jsonl(path, &records)
}

/// Corpus as JSON lines with every record stamped with `config_hash`.
pub fn corpus_to_jsonl(entries: &[CorpusEntry], config_hash: &str) -> Result<String> {
    let records: Vec<DocRecord> = entries
        .iter()
        .map(|e| DocRecord {
            config_hash: Some(config_hash.to_string()),
            ..DocRecord::from(e)
        })
        .collect();
    to_jsonl(&records)
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusEntry>> {
    let records: Vec<DocRecord> = read_jsonl(path)?;
    Ok(records.into_iter().map(CorpusEntry::from).collect())
}
