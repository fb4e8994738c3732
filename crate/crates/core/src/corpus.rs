//! Sentence datasets: ingest and export in JSONL and CSV.
//!
//! JSONL lines carry the sentence text under `context`, with optional `id`,
//! `source`, `abstract` (surrounding text) and `concepts` keys. CSV files
//! need a header row with a `text` column and may add `id`, `source` and
//! `abstract` columns.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use indexmap::IndexMap;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{AnnotationSet, Provenance};
use crate::concepts::{clean_surface, Concept};

/// Annotator id under which `concepts` found in an ingested file are kept.
pub const FILE_GOLD: &str = "file-gold";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty input")]
    EmptyInput,
    #[error("input is not valid UTF-8: {0}")]
    Encoding(#[from] std::str::Utf8Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate sentence id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("sentence index {index} out of range (dataset has {len} sentences)")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("unknown format {0:?} (expected csv or jsonl)")]
    UnknownFormat(String),
    #[error("csv export failed: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl FromStr for Format {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "jsonl" | "ndjson" => Ok(Format::Jsonl),
            _ => Err(CorpusError::UnknownFormat(s.to_string())),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Csv => "csv",
            Format::Jsonl => "jsonl",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
}

impl Sentence {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Sentence {
            id: id.into(),
            text: text.into(),
            source: String::new(),
            context: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub sentences: Vec<Sentence>,
    pub created_at: DateTime<Utc>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn get_sentence(&self, index: usize) -> Result<&Sentence, CorpusError> {
        self.sentences
            .get(index)
            .ok_or(CorpusError::IndexOutOfRange {
                index,
                len: self.sentences.len(),
            })
    }

    pub fn position(&self, sentence_id: &str) -> Option<usize> {
        self.sentences.iter().position(|s| s.id == sentence_id)
    }

    /// A reproducible random subset of `n` sentences, kept in corpus order.
    pub fn sample(&self, n: usize, seed: u64, name: impl Into<String>) -> Dataset {
        let n = n.min(self.sentences.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = sample(&mut rng, self.sentences.len(), n).into_vec();
        picked.sort_unstable();
        Dataset {
            name: name.into(),
            sentences: picked
                .into_iter()
                .map(|i| self.sentences[i].clone())
                .collect(),
            created_at: self.created_at,
        }
    }
}

/// Non-fatal findings from ingest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IngestWarning {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub dataset: Dataset,
    /// Concepts that came with the file, stored as-is under [`FILE_GOLD`].
    pub gold: Option<AnnotationSet>,
    pub warnings: Vec<IngestWarning>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonlRow {
    #[serde(alias = "text")]
    context: String,
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    source: Option<String>,
    #[serde(default, rename = "abstract")]
    surrounding: Option<String>,
    #[serde(default)]
    concepts: Option<Vec<String>>,
}

#[derive(Serialize)]
struct JsonlOut<'a> {
    id: &'a str,
    context: &'a str,
    #[serde(skip_serializing_if = "str::is_empty")]
    source: &'a str,
    #[serde(rename = "abstract", skip_serializing_if = "Option::is_none")]
    surrounding: Option<&'a str>,
}

struct Row {
    line: usize,
    id: Option<String>,
    text: String,
    source: String,
    context: Option<String>,
    concepts: Option<Vec<String>>,
}

pub fn ingest(raw: &[u8], format: Format, name: &str) -> Result<Ingested, CorpusError> {
    ingest_at(raw, format, name, Utc::now())
}

/// [`ingest`] with an explicit creation time.
pub fn ingest_at(
    raw: &[u8],
    format: Format,
    name: &str,
    created_at: DateTime<Utc>,
) -> Result<Ingested, CorpusError> {
    let text = std::str::from_utf8(raw)?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let rows = match format {
        Format::Jsonl => read_jsonl(text)?,
        Format::Csv => read_csv(text)?,
    };
    if rows.is_empty() {
        return Err(CorpusError::EmptyInput);
    }

    let width = ordinal_width(rows.len());
    let mut seen = HashSet::new();
    let mut sentences = Vec::with_capacity(rows.len());
    let mut warnings = Vec::new();
    let mut gold: IndexMap<String, Vec<Concept>> = IndexMap::new();
    for (ordinal, row) in rows.into_iter().enumerate() {
        if row.text.trim().is_empty() {
            return Err(CorpusError::Malformed {
                line: row.line,
                message: "sentence text is empty".into(),
            });
        }
        let id = row
            .id
            .filter(|i| !i.is_empty())
            .unwrap_or_else(|| format!("{ordinal:0width$}"));
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId { line: row.line, id });
        }
        if has_latex_command(&row.text) {
            warnings.push(IngestWarning {
                line: row.line,
                message: "text contains a backslash command (LaTeX markup?)".into(),
            });
        }
        if let Some(concepts) = row.concepts {
            let items = concepts
                .into_iter()
                .filter_map(|c| {
                    let cleaned = clean_surface(&c);
                    (!cleaned.is_empty()).then(|| Concept::accepted(c, cleaned))
                })
                .collect();
            gold.insert(id.clone(), items);
        }
        sentences.push(Sentence {
            id,
            text: row.text,
            source: row.source,
            context: row.context,
        });
    }

    let gold = (!gold.is_empty()).then(|| {
        let mut set = AnnotationSet::new(FILE_GOLD, name, Provenance::FileGold);
        for (id, items) in gold {
            set.insert(&id, items);
        }
        set
    });

    Ok(Ingested {
        dataset: Dataset {
            name: name.to_string(),
            sentences,
            created_at,
        },
        gold,
        warnings,
    })
}

fn ordinal_width(n: usize) -> usize {
    let digits = n.saturating_sub(1).to_string().len();
    digits.max(3)
}

fn has_latex_command(text: &str) -> bool {
    let bytes = text.as_bytes();
    bytes
        .windows(2)
        .any(|w| w[0] == b'\\' && w[1].is_ascii_alphabetic())
}

fn read_jsonl(text: &str) -> Result<Vec<Row>, CorpusError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let row: JsonlRow = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        rows.push(Row {
            line: line_no,
            id: row.id,
            text: row.context,
            source: row.source.unwrap_or_default(),
            context: row.surrounding,
            concepts: row.concepts,
        });
    }
    Ok(rows)
}

fn read_csv(text: &str) -> Result<Vec<Row>, CorpusError> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::Malformed {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
    };
    let text_col = col("text")
        .or_else(|| col("context"))
        .ok_or(CorpusError::Malformed {
            line: 1,
            message: "header must contain a `text` column".into(),
        })?;
    let id_col = col("id");
    let source_col = col("source");
    let abstract_col = col("abstract");

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CorpusError::Malformed {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |c: Option<usize>| c.and_then(|c| record.get(c)).map(str::to_string);
        rows.push(Row {
            line,
            id: field(id_col),
            text: field(Some(text_col)).unwrap_or_default(),
            source: field(source_col).unwrap_or_default(),
            context: field(abstract_col).filter(|s| !s.is_empty()),
            concepts: None,
        });
    }
    Ok(rows)
}

/// Serialize a dataset. JSONL output is one LF-terminated object per
/// sentence; CSV output always has the `id,text,source,abstract` header.
pub fn export(dataset: &Dataset, format: Format) -> Result<Vec<u8>, CorpusError> {
    match format {
        Format::Jsonl => {
            let mut out = Vec::new();
            for s in &dataset.sentences {
                let row = JsonlOut {
                    id: &s.id,
                    context: &s.text,
                    source: &s.source,
                    surrounding: s.context.as_deref(),
                };
                serde_json::to_writer(&mut out, &row).expect("plain struct serializes");
                out.push(b'\n');
            }
            Ok(out)
        }
        Format::Csv => {
            let mut writer = csv::WriterBuilder::new()
                .terminator(csv::Terminator::CRLF)
                .from_writer(Vec::new());
            writer.write_record(["id", "text", "source", "abstract"])?;
            for s in &dataset.sentences {
                writer.write_record([
                    s.id.as_str(),
                    s.text.as_str(),
                    s.source.as_str(),
                    s.context.as_deref().unwrap_or(""),
                ])?;
            }
            writer
                .into_inner()
                .map_err(|e| CorpusError::Csv(csv::Error::from(e.into_error())))
        }
    }
}
