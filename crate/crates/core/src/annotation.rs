//! Per-annotator concept sets and their JSONL form.

use std::collections::BTreeSet;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concepts::{Concept, Status};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    #[serde(rename = "human")]
    Human,
    #[serde(rename = "llm")]
    Llm,
    #[serde(rename = "rule_baseline")]
    RuleBaseline,
    #[serde(rename = "file-gold")]
    FileGold,
}

/// Adjudication outcome for one concept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Keep,
    Reject,
    Replace,
}

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
}

/// Which concepts count when pooling a set across sentences.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SetOptions {
    /// Compare lowercased forms.
    pub case_fold: bool,
    /// Count candidates as well as accepted concepts.
    pub include_candidates: bool,
}

impl SetOptions {
    pub fn counts(&self, concept: &Concept) -> bool {
        match concept.status {
            Status::Accepted => true,
            Status::Candidate => self.include_candidates,
            Status::Rejected => false,
        }
    }

    pub fn key(&self, normalized: &str) -> String {
        if self.case_fold {
            normalized.to_lowercase()
        } else {
            normalized.to_string()
        }
    }
}

/// One annotator's concepts over a dataset, keyed by sentence id.
///
/// Sentence entries keep insertion order. Within a sentence the normalized
/// forms are unique; the first occurrence wins. An entry with an empty list
/// means "looked at, nothing found" and is distinct from a missing entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationSet {
    pub annotator_id: String,
    pub dataset_name: String,
    pub provenance: Provenance,
    per_sentence: IndexMap<String, Vec<Concept>>,
}

impl AnnotationSet {
    pub fn new(
        annotator_id: impl Into<String>,
        dataset_name: impl Into<String>,
        provenance: Provenance,
    ) -> Self {
        AnnotationSet {
            annotator_id: annotator_id.into(),
            dataset_name: dataset_name.into(),
            provenance,
            per_sentence: IndexMap::new(),
        }
    }

    /// Set the concepts of one sentence, replacing any previous entry.
    pub fn insert(&mut self, sentence_id: &str, items: Vec<Concept>) {
        let mut deduped: Vec<Concept> = Vec::with_capacity(items.len());
        for c in items {
            if !deduped.iter().any(|d| d.normalized == c.normalized) {
                deduped.push(c);
            }
        }
        self.per_sentence.insert(sentence_id.to_string(), deduped);
    }

    pub fn concepts(&self, sentence_id: &str) -> Option<&[Concept]> {
        self.per_sentence.get(sentence_id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[Concept])> {
        self.per_sentence
            .iter()
            .map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn sentence_count(&self) -> usize {
        self.per_sentence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_sentence.is_empty()
    }

    /// Reorder sentence entries to follow `order`; unknown ids go last.
    pub fn sort_by_sentence_order(&mut self, order: &[String]) {
        let rank = |id: &str| order.iter().position(|o| o == id).unwrap_or(usize::MAX);
        self.per_sentence
            .sort_by(|a, _, b, _| rank(a).cmp(&rank(b)));
    }

    /// The dataset-pooled set of counted normalized forms.
    pub fn global_set(&self, opts: SetOptions) -> BTreeSet<String> {
        self.per_sentence
            .values()
            .flatten()
            .filter(|c| opts.counts(c))
            .map(|c| opts.key(&c.normalized))
            .collect()
    }

    /// Sentence ids whose entry contains `key` (compared under `opts`).
    pub fn sentences_with(&self, key: &str, opts: SetOptions) -> Vec<String> {
        self.per_sentence
            .iter()
            .filter(|(_, cs)| {
                cs.iter()
                    .any(|c| opts.counts(c) && opts.key(&c.normalized) == key)
            })
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn to_lines(&self) -> Vec<AnnotationLine> {
        self.iter()
            .map(|(id, cs)| AnnotationLine {
                sentence_id: id.to_string(),
                annotator: self.annotator_id.clone(),
                concepts: cs.iter().cloned().map(LineConcept::from).collect(),
            })
            .collect()
    }

    /// One JSON object per sentence entry, LF-terminated.
    pub fn to_jsonl(&self) -> Vec<u8> {
        write_lines(&self.to_lines())
    }

    /// Group parsed lines by annotator, in first-seen order.
    pub fn from_lines(
        lines: impl IntoIterator<Item = AnnotationLine>,
        dataset_name: &str,
        provenance: Provenance,
    ) -> Vec<AnnotationSet> {
        let mut sets: IndexMap<String, AnnotationSet> = IndexMap::new();
        for line in lines {
            let set = sets
                .entry(line.annotator.clone())
                .or_insert_with(|| AnnotationSet::new(&line.annotator, dataset_name, provenance));
            set.insert(
                &line.sentence_id,
                line.concepts.into_iter().map(|c| c.concept).collect(),
            );
        }
        sets.into_values().collect()
    }
}

/// A concept as written to JSONL, optionally carrying its adjudication verdict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineConcept {
    #[serde(flatten)]
    pub concept: Concept,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
}

impl From<Concept> for LineConcept {
    fn from(concept: Concept) -> Self {
        LineConcept {
            concept,
            verdict: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationLine {
    pub sentence_id: String,
    pub annotator: String,
    pub concepts: Vec<LineConcept>,
}

pub fn write_lines(lines: &[AnnotationLine]) -> Vec<u8> {
    let mut out = Vec::new();
    for line in lines {
        serde_json::to_writer(&mut out, line).expect("annotation line serializes");
        out.push(b'\n');
    }
    out
}

/// Parse annotation JSONL; blank lines are skipped.
pub fn parse_lines(raw: &str) -> Result<Vec<AnnotationLine>, AnnotationError> {
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| AnnotationError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
