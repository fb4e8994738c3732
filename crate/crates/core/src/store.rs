//! Durable store for datasets, annotations and adjudication decisions.
//!
//! Every change is one line appended (and synced) to `events.jsonl` under
//! the store root; the in-memory state is rebuilt by replaying that log.
//! Writers are serialized by a mutex. Readers take a cheap snapshot that is
//! swapped in after each commit.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agreement::{AgreementError, AgreementReport};
use crate::annotation::{
    parse_lines, write_lines, AnnotationError, AnnotationLine, AnnotationSet, LineConcept,
    Provenance, SetOptions, Verdict,
};
use crate::concepts::{normalize_term, Concept, RemovalReason, RuleConfig, Status};
use crate::corpus::{CorpusError, Dataset, Sentence};

pub const EVENT_LOG: &str = "events.jsonl";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("event log line {line} is corrupt: {message}")]
    Corrupt { line: usize, message: String },
    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),
    #[error("dataset {0:?} already exists")]
    DatasetExists(String),
    #[error("dataset name must be non-empty and must not contain '/'")]
    InvalidDatasetName,
    #[error("dataset {dataset:?} has no sentence {sentence:?}")]
    UnknownSentence { dataset: String, sentence: String },
    #[error("annotator {annotator:?} has no annotations on dataset {dataset:?}")]
    UnknownAnnotator { dataset: String, annotator: String },
    #[error("annotator id must not be empty")]
    EmptyAnnotator,
    #[error("invalid decision: {0}")]
    InvalidDecision(String),
    #[error("concept {concept:?} is not in any compared annotator's set on {dataset:?}")]
    UnknownConcept { dataset: String, concept: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Agreement(#[from] AgreementError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn now() -> DateTime<Utc> {
    Utc::now()
}

/// A final call on one concept of a dataset. The latest decision for a
/// (dataset, concept) pair supersedes earlier ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjudicationDecision {
    pub dataset_name: String,
    pub concept_normalized: String,
    /// Annotators whose sets the decision applies to; empty means all.
    #[serde(default)]
    pub source_annotators: Vec<String>,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replacement: Option<String>,
    #[serde(default)]
    pub adjudicator_id: String,
    #[serde(default = "now")]
    pub timestamp: DateTime<Utc>,
}

impl AdjudicationDecision {
    pub fn applies_to(&self, annotator: &str) -> bool {
        self.source_annotators.is_empty() || self.source_annotators.iter().any(|a| a == annotator)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    DatasetCreated {
        dataset: Dataset,
    },
    AnnotationSubmitted {
        dataset: String,
        sentence_id: String,
        annotator: String,
        provenance: Provenance,
        concepts: Vec<Concept>,
        timestamp: DateTime<Utc>,
    },
    AdjudicationRecorded {
        decision: AdjudicationDecision,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetSummary {
    pub name: String,
    pub sentence_count: usize,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueItem {
    pub concept_normalized: String,
    pub present_in: Vec<String>,
    pub absent_from: Vec<String>,
    pub example_sentence_ids: Vec<String>,
    pub resolved: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
}

/// The symmetric difference of two annotators' global sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisagreementQueue {
    pub dataset: String,
    pub annotators: [String; 2],
    pub items: Vec<QueueItem>,
}

impl DisagreementQueue {
    pub fn unresolved(&self) -> usize {
        self.items.iter().filter(|i| !i.resolved).count()
    }
}

const EXAMPLE_SENTENCES: usize = 3;

/// Everything the log describes, indexed for reads.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct State {
    datasets: IndexMap<String, Arc<Dataset>>,
    /// dataset → annotator → set
    annotations: IndexMap<String, IndexMap<String, Arc<AnnotationSet>>>,
    /// dataset → concept → live decision
    decisions: IndexMap<String, IndexMap<String, AdjudicationDecision>>,
}

impl State {
    pub fn apply(&mut self, event: &Event) {
        match event {
            Event::DatasetCreated { dataset } => {
                self.datasets
                    .insert(dataset.name.clone(), Arc::new(dataset.clone()));
            }
            Event::AnnotationSubmitted {
                dataset,
                sentence_id,
                annotator,
                provenance,
                concepts,
                ..
            } => {
                let sets = self.annotations.entry(dataset.clone()).or_default();
                let set = sets.entry(annotator.clone()).or_insert_with(|| {
                    Arc::new(AnnotationSet::new(annotator, dataset, *provenance))
                });
                Arc::make_mut(set).insert(sentence_id, concepts.clone());
            }
            Event::AdjudicationRecorded { decision } => {
                self.decisions
                    .entry(decision.dataset_name.clone())
                    .or_default()
                    .insert(decision.concept_normalized.clone(), decision.clone());
            }
        }
    }

    pub fn dataset(&self, name: &str) -> Result<&Arc<Dataset>, StoreError> {
        self.datasets
            .get(name)
            .ok_or_else(|| StoreError::UnknownDataset(name.to_string()))
    }

    pub fn datasets(&self) -> Vec<DatasetSummary> {
        self.datasets
            .values()
            .map(|d| DatasetSummary {
                name: d.name.clone(),
                sentence_count: d.len(),
                created_at: d.created_at,
            })
            .collect()
    }

    /// Annotator ids with entries on `dataset`, sorted.
    pub fn annotators(&self, dataset: &str) -> Vec<String> {
        let mut ids: Vec<String> = self
            .annotations
            .get(dataset)
            .map(|m| m.keys().cloned().collect())
            .unwrap_or_default();
        ids.sort();
        ids
    }

    /// The set as submitted, before any decisions.
    pub fn raw_set(&self, dataset: &str, annotator: &str) -> Result<&AnnotationSet, StoreError> {
        self.dataset(dataset)?;
        self.annotations
            .get(dataset)
            .and_then(|m| m.get(annotator))
            .map(Arc::as_ref)
            .ok_or_else(|| StoreError::UnknownAnnotator {
                dataset: dataset.to_string(),
                annotator: annotator.to_string(),
            })
    }

    pub fn decisions(&self, dataset: &str) -> Vec<&AdjudicationDecision> {
        self.decisions
            .get(dataset)
            .map(|m| m.values().collect())
            .unwrap_or_default()
    }

    fn decision_for(
        &self,
        dataset: &str,
        concept: &str,
        annotator: &str,
    ) -> Option<&AdjudicationDecision> {
        self.decisions
            .get(dataset)?
            .get(concept)
            .filter(|d| d.applies_to(annotator))
    }

    /// Lines of one annotator in dataset order, with decisions applied when
    /// `adjudicated` (each decided concept then carries its verdict).
    pub fn lines(
        &self,
        dataset: &str,
        annotator: &str,
        adjudicated: bool,
    ) -> Result<Vec<AnnotationLine>, StoreError> {
        let data = self.dataset(dataset)?;
        let set = self.raw_set(dataset, annotator)?;
        let mut out = Vec::new();
        for sentence in &data.sentences {
            let Some(concepts) = set.concepts(&sentence.id) else {
                continue;
            };
            let mut items: Vec<LineConcept> = Vec::with_capacity(concepts.len());
            for c in concepts {
                let item = match self
                    .decision_for(dataset, &c.normalized, annotator)
                    .filter(|_| adjudicated)
                {
                    None => LineConcept::from(c.clone()),
                    Some(d) => {
                        let concept = match d.verdict {
                            Verdict::Keep => c.clone(),
                            Verdict::Reject => c.clone().reject(RemovalReason::AdjudicatedOut),
                            Verdict::Replace => Concept {
                                normalized: d.replacement.clone().unwrap_or_default(),
                                ..c.clone()
                            },
                        };
                        LineConcept {
                            concept,
                            verdict: Some(d.verdict),
                        }
                    }
                };
                if !items
                    .iter()
                    .any(|i| i.concept.normalized == item.concept.normalized)
                {
                    items.push(item);
                }
            }
            out.push(AnnotationLine {
                sentence_id: sentence.id.clone(),
                annotator: annotator.to_string(),
                concepts: items,
            });
        }
        Ok(out)
    }

    pub fn adjudicated_set(
        &self,
        dataset: &str,
        annotator: &str,
    ) -> Result<AnnotationSet, StoreError> {
        let provenance = self.raw_set(dataset, annotator)?.provenance;
        let lines = self.lines(dataset, annotator, true)?;
        let mut set = AnnotationSet::new(annotator, dataset, provenance);
        for line in lines {
            set.insert(
                &line.sentence_id,
                line.concepts.into_iter().map(|c| c.concept).collect(),
            );
        }
        Ok(set)
    }

    pub fn disagreement_queue(
        &self,
        dataset: &str,
        a: &str,
        b: &str,
    ) -> Result<DisagreementQueue, StoreError> {
        let opts = SetOptions::default();
        let sa = self.raw_set(dataset, a)?;
        let sb = self.raw_set(dataset, b)?;
        let ga = sa.global_set(opts);
        let gb = sb.global_set(opts);
        let mut items: Vec<QueueItem> = ga
            .symmetric_difference(&gb)
            .map(|concept| {
                let (present, absent, set) = if ga.contains(concept) {
                    (a, b, sa)
                } else {
                    (b, a, sb)
                };
                let decision = self.decision_for(dataset, concept, present);
                let mut examples = set.sentences_with(concept, opts);
                examples.truncate(EXAMPLE_SENTENCES);
                QueueItem {
                    concept_normalized: concept.clone(),
                    present_in: vec![present.to_string()],
                    absent_from: vec![absent.to_string()],
                    example_sentence_ids: examples,
                    resolved: decision.is_some(),
                    verdict: decision.map(|d| d.verdict),
                }
            })
            .collect();
        items.sort_by(|x, y| x.concept_normalized.cmp(&y.concept_normalized));
        Ok(DisagreementQueue {
            dataset: dataset.to_string(),
            annotators: [a.to_string(), b.to_string()],
            items,
        })
    }

    /// Agreement between annotators; `adjudicated` applies decisions first.
    pub fn agreement(
        &self,
        dataset: &str,
        annotators: &[String],
        opts: SetOptions,
        adjudicated: bool,
    ) -> Result<AgreementReport, StoreError> {
        let mut sets = Vec::with_capacity(annotators.len());
        for a in annotators {
            sets.push(if adjudicated {
                self.adjudicated_set(dataset, a)?
            } else {
                self.raw_set(dataset, a)?.clone()
            });
        }
        Ok(AgreementReport::from_sets(&sets, opts)?)
    }

    /// JSONL of all (or one) annotators: annotators sorted, sentences in
    /// dataset order.
    pub fn export(
        &self,
        dataset: &str,
        annotator: Option<&str>,
        include_decisions: bool,
    ) -> Result<Vec<u8>, StoreError> {
        self.dataset(dataset)?;
        let annotators = match annotator {
            Some(a) => vec![a.to_string()],
            None => self.annotators(dataset),
        };
        let mut lines = Vec::new();
        for a in &annotators {
            lines.extend(self.lines(dataset, a, include_decisions)?);
        }
        Ok(write_lines(&lines))
    }
}

pub struct Store {
    root: PathBuf,
    log_path: PathBuf,
    writer: Mutex<File>,
    state: RwLock<Arc<State>>,
    config: RuleConfig,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("root", &self.root)
            .finish_non_exhaustive()
    }
}

impl Store {
    /// Open (or create) a store rooted at `root` with the default rules.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::open_with(root, RuleConfig::default())
    }

    /// Open a store. A final log line cut short by a crash is discarded;
    /// a corrupt line anywhere else is an error.
    pub fn open_with(root: impl AsRef<Path>, config: RuleConfig) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        std::fs::create_dir_all(&root).map_err(io_err(&root))?;
        let log_path = root.join(EVENT_LOG);
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&log_path)
            .map_err(io_err(&log_path))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(io_err(&log_path))?;

        let complete = match bytes.iter().rposition(|&b| b == b'\n') {
            Some(i) => i + 1,
            None => 0,
        };
        if complete < bytes.len() {
            log::warn!(
                "discarding {} bytes of an unfinished write at the end of {}",
                bytes.len() - complete,
                log_path.display()
            );
            file.set_len(complete as u64).map_err(io_err(&log_path))?;
            file.sync_all().map_err(io_err(&log_path))?;
            file.seek(SeekFrom::End(0)).map_err(io_err(&log_path))?;
        }

        let text = std::str::from_utf8(&bytes[..complete]).map_err(|e| StoreError::Corrupt {
            line: 0,
            message: e.to_string(),
        })?;
        let mut state = State::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let event: Event = serde_json::from_str(line).map_err(|e| StoreError::Corrupt {
                line: i + 1,
                message: e.to_string(),
            })?;
            state.apply(&event);
        }
        Ok(Store {
            root,
            log_path,
            writer: Mutex::new(file),
            state: RwLock::new(Arc::new(state)),
            config,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &RuleConfig {
        &self.config
    }

    /// The current state; later commits do not affect it.
    pub fn snapshot(&self) -> Arc<State> {
        self.state.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    /// Validate against the current state, append and sync the events, then
    /// publish the new state.
    fn commit<T>(
        &self,
        build: impl FnOnce(&State) -> Result<(Vec<Event>, T), StoreError>,
    ) -> Result<T, StoreError> {
        let mut file = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        let current = self.snapshot();
        let (events, value) = build(&current)?;
        if events.is_empty() {
            return Ok(value);
        }
        let mut buf = String::new();
        let mut next = State::clone(&current);
        for e in &events {
            buf.push_str(&serde_json::to_string(e).expect("event serializes"));
            buf.push('\n');
            next.apply(e);
        }
        file.write_all(buf.as_bytes())
            .map_err(io_err(&self.log_path))?;
        file.sync_data().map_err(io_err(&self.log_path))?;
        *self.state.write().unwrap_or_else(|p| p.into_inner()) = Arc::new(next);
        Ok(value)
    }

    pub fn create_dataset(&self, dataset: Dataset) -> Result<DatasetSummary, StoreError> {
        if dataset.name.is_empty() || dataset.name.contains('/') {
            return Err(StoreError::InvalidDatasetName);
        }
        self.commit(|state| {
            if state.datasets.contains_key(&dataset.name) {
                return Err(StoreError::DatasetExists(dataset.name.clone()));
            }
            let summary = DatasetSummary {
                name: dataset.name.clone(),
                sentence_count: dataset.len(),
                created_at: dataset.created_at,
            };
            Ok((vec![Event::DatasetCreated { dataset }], summary))
        })
    }

    pub fn datasets(&self) -> Vec<DatasetSummary> {
        self.snapshot().datasets()
    }

    pub fn dataset(&self, name: &str) -> Result<Arc<Dataset>, StoreError> {
        self.snapshot().dataset(name).cloned()
    }

    pub fn get_sentence(&self, dataset: &str, index: usize) -> Result<Sentence, StoreError> {
        Ok(self.dataset(dataset)?.get_sentence(index)?.clone())
    }

    /// Store one annotator's concepts for one sentence, replacing any
    /// earlier submission. Terms are normalized; blanks and duplicates drop.
    pub fn submit_annotation(
        &self,
        dataset: &str,
        sentence_id: &str,
        annotator: &str,
        concepts: &[String],
    ) -> Result<Vec<Concept>, StoreError> {
        if annotator.trim().is_empty() {
            return Err(StoreError::EmptyAnnotator);
        }
        let mut items: Vec<Concept> = Vec::new();
        for c in concepts {
            let n = normalize_term(c, &self.config);
            if n.status != Status::Rejected && !items.iter().any(|i| i.normalized == n.normalized) {
                items.push(n);
            }
        }
        self.commit(|state| {
            let data = state.dataset(dataset)?;
            if data.position(sentence_id).is_none() {
                return Err(StoreError::UnknownSentence {
                    dataset: dataset.to_string(),
                    sentence: sentence_id.to_string(),
                });
            }
            let provenance = state
                .raw_set(dataset, annotator)
                .map(|s| s.provenance)
                .unwrap_or(Provenance::Human);
            let event = Event::AnnotationSubmitted {
                dataset: dataset.to_string(),
                sentence_id: sentence_id.to_string(),
                annotator: annotator.to_string(),
                provenance,
                concepts: items.clone(),
                timestamp: Utc::now(),
            };
            Ok((vec![event], items))
        })
    }

    /// Store a whole annotation set as-is (one event per sentence, one sync).
    pub fn put_set(&self, set: &AnnotationSet) -> Result<usize, StoreError> {
        if set.annotator_id.trim().is_empty() {
            return Err(StoreError::EmptyAnnotator);
        }
        self.commit(|state| {
            let data = state.dataset(&set.dataset_name)?;
            let stamp = Utc::now();
            let mut events = Vec::with_capacity(set.sentence_count());
            for (id, concepts) in set.iter() {
                if data.position(id).is_none() {
                    return Err(StoreError::UnknownSentence {
                        dataset: set.dataset_name.clone(),
                        sentence: id.to_string(),
                    });
                }
                events.push(Event::AnnotationSubmitted {
                    dataset: set.dataset_name.clone(),
                    sentence_id: id.to_string(),
                    annotator: set.annotator_id.clone(),
                    provenance: set.provenance,
                    concepts: concepts.to_vec(),
                    timestamp: stamp,
                });
            }
            let n = events.len();
            Ok((events, n))
        })
    }

    /// Load exported annotation JSONL into `dataset`. Verdict fields are
    /// ignored; concepts are stored exactly as written.
    pub fn import_annotations(
        &self,
        dataset: &str,
        raw: &str,
        provenance: Provenance,
    ) -> Result<usize, StoreError> {
        let lines = parse_lines(raw)?;
        let sets = AnnotationSet::from_lines(lines, dataset, provenance);
        let mut total = 0;
        self.dataset(dataset)?;
        for set in &sets {
            total += self.put_set(set)?;
        }
        Ok(total)
    }

    /// Record a decision. A replacement is normalized before it is stored.
    pub fn submit_adjudication(
        &self,
        mut decision: AdjudicationDecision,
    ) -> Result<AdjudicationDecision, StoreError> {
        match decision.verdict {
            Verdict::Replace => {
                let raw = decision.replacement.as_deref().unwrap_or("");
                let n = normalize_term(raw, &self.config);
                if n.status == Status::Rejected {
                    return Err(StoreError::InvalidDecision(
                        "replace needs a non-empty replacement".into(),
                    ));
                }
                decision.replacement = Some(n.normalized);
            }
            Verdict::Keep | Verdict::Reject => {
                if decision.replacement.is_some() {
                    return Err(StoreError::InvalidDecision(
                        "replacement is only allowed with verdict replace".into(),
                    ));
                }
            }
        }
        self.commit(|state| {
            let dataset = &decision.dataset_name;
            state.dataset(dataset)?;
            let annotators = if decision.source_annotators.is_empty() {
                state.annotators(dataset)
            } else {
                decision.source_annotators.clone()
            };
            let mut known = false;
            for a in &annotators {
                let set = state.raw_set(dataset, a)?;
                known |= set
                    .global_set(SetOptions::default())
                    .contains(&decision.concept_normalized);
            }
            let decided = state
                .decisions
                .get(dataset)
                .is_some_and(|m| m.contains_key(&decision.concept_normalized));
            if !known && !decided {
                return Err(StoreError::UnknownConcept {
                    dataset: dataset.clone(),
                    concept: decision.concept_normalized.clone(),
                });
            }
            Ok((
                vec![Event::AdjudicationRecorded {
                    decision: decision.clone(),
                }],
                decision.clone(),
            ))
        })
    }
}

/// Replace `path` with `bytes` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| StoreError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}
