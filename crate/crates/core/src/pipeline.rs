//! Sentence → prompt → model → parsed, normalized and filtered concepts.

use std::collections::{BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::annotation::{AnnotationSet, Provenance};
use crate::concepts::{
    classify_name_usage, expand_subspans, is_meta_term, normalize_term, singularize,
    split_prepositional, standalone_adjective, Concept, NameUsage, RemovalReason, RuleConfig,
    Status,
};
use crate::corpus::{Dataset, Sentence};
use crate::gateway::{BatchOptions, Gateway, GatewayError};
use crate::prompting::{build_prompt, parse_concepts, ParseStatus, PromptTemplate};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("dataset {0:?} has no sentences")]
    EmptyDataset(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// What filtering did to a list of concepts.
///
/// `kept_count + removed.len() == input_count + added.len()`; duplicates are
/// logged in `removed` with their own reason.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input_count: usize,
    pub kept_count: usize,
    /// Rejected items, each carrying its reason.
    pub removed: Vec<Concept>,
    pub added: Vec<Concept>,
}

impl FilterReport {
    pub fn merge(&mut self, other: FilterReport) {
        self.input_count += other.input_count;
        self.kept_count += other.kept_count;
        self.removed.extend(other.removed);
        self.added.extend(other.added);
    }

    pub fn is_balanced(&self) -> bool {
        self.kept_count + self.removed.len() == self.input_count + self.added.len()
    }

    /// Removal counts by reason, in reason order.
    pub fn removed_by_reason(&self) -> Vec<(RemovalReason, usize)> {
        let mut counts: Vec<(RemovalReason, usize)> = Vec::new();
        for c in &self.removed {
            let reason = c.removal_reason.unwrap_or(RemovalReason::Empty);
            match counts.iter_mut().find(|(r, _)| *r == reason) {
                Some((_, n)) => *n += 1,
                None => counts.push((reason, 1)),
            }
        }
        counts.sort();
        counts
    }
}

/// Apply the guideline filters to normalized concepts.
///
/// In order: drop empties, re-singularize, reduce "adjective + genre noun"
/// to the adjective, reject genre words, reject bare person names, split at
/// prepositions (when enabled) and drop duplicates. Fragments produced by
/// a split run through the same steps.
pub fn post_filter(items: Vec<Concept>, config: &RuleConfig) -> (Vec<Concept>, FilterReport) {
    let mut report = FilterReport {
        input_count: items.len(),
        ..FilterReport::default()
    };
    let mut kept: Vec<Concept> = Vec::new();
    let mut queue: VecDeque<Concept> = items.into();

    while let Some(mut c) = queue.pop_front() {
        if c.status == Status::Rejected {
            report.removed.push(c);
            continue;
        }
        if c.normalized.trim().is_empty() {
            report.removed.push(c.reject(RemovalReason::Empty));
            continue;
        }
        let single = singularize(&c.normalized, config);
        let was_plural = single != c.normalized;
        c.normalized = single;
        if let Some(adjective) = standalone_adjective(&c.normalized, config) {
            c.normalized = singularize(&adjective, config);
        }
        if is_meta_term(&c.normalized, config) {
            report.removed.push(c.reject(RemovalReason::MetaWord));
            continue;
        }
        if classify_name_usage(&c.normalized, config) == NameUsage::BareName {
            report.removed.push(c.reject(RemovalReason::BarePersonName));
            continue;
        }
        if config.split_long_spans {
            let fragments = split_prepositional(&c.normalized, config);
            if fragments.len() != 1 || fragments[0] != c.normalized {
                for (k, f) in fragments.into_iter().enumerate() {
                    let fragment = Concept {
                        surface: f.clone(),
                        normalized: f,
                        status: c.status,
                        removal_reason: None,
                    };
                    report.added.push(fragment.clone());
                    queue.insert(k, fragment);
                }
                report
                    .removed
                    .push(c.reject(RemovalReason::PrepositionalSplit));
                continue;
            }
        }
        if kept.iter().any(|k| k.normalized == c.normalized) {
            let reason = if was_plural {
                RemovalReason::PluralArtifact
            } else {
                RemovalReason::Duplicate
            };
            report.removed.push(c.reject(reason));
            continue;
        }
        kept.push(c);
    }
    report.kept_count = kept.len();
    (kept, report)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExtractOptions {
    /// Append candidate sub-spans of every kept multi-word concept.
    pub expand_subspans: bool,
}

/// Result of processing one model reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Extraction {
    pub concepts: Vec<Concept>,
    pub report: FilterReport,
    pub parse_status: ParseStatus,
    pub warnings: Vec<String>,
}

/// Parse, normalize and filter a raw model reply.
pub fn process_response(raw: &str, config: &RuleConfig, options: ExtractOptions) -> Extraction {
    let parsed = parse_concepts(raw);
    let mut warnings = parsed.warnings;
    if parsed.parse_status == ParseStatus::Unparseable {
        log::warn!("unparseable model reply: {:.80}", raw);
        warnings.push("reply contains no concept list".into());
    }
    let normalized = parsed
        .parsed_concepts
        .iter()
        .map(|s| normalize_term(s, config))
        .collect();
    let (mut concepts, mut report) = post_filter(normalized, config);
    if options.expand_subspans {
        let mut extra = Vec::new();
        for c in concepts.iter().filter(|c| c.status == Status::Accepted) {
            for sub in expand_subspans(&c.normalized, config) {
                let present = concepts
                    .iter()
                    .chain(&extra)
                    .any(|k: &Concept| k.normalized == sub.normalized);
                if !present && !is_meta_term(&sub.normalized, config) {
                    extra.push(sub);
                }
            }
        }
        report.added.extend(extra.iter().cloned());
        report.kept_count += extra.len();
        concepts.extend(extra);
    }
    Extraction {
        concepts,
        report,
        parse_status: parsed.parse_status,
        warnings,
    }
}

pub fn extract_sentence(
    sentence: &Sentence,
    template: &PromptTemplate,
    gateway: &Gateway,
    config: &RuleConfig,
    options: ExtractOptions,
) -> Result<Extraction, GatewayError> {
    let prompt = build_prompt(sentence, template);
    let raw = gateway.complete(&prompt)?;
    Ok(process_response(&raw, config, options))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SentenceFailure {
    pub sentence_id: String,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct BatchRun {
    /// Entries for every sentence that got a reply, in dataset order.
    pub set: AnnotationSet,
    pub report: FilterReport,
    pub failures: Vec<SentenceFailure>,
    /// Sentences whose reply had no parseable list (recorded with no concepts).
    pub unparseable: Vec<String>,
}

impl BatchRun {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Extract concepts for a whole dataset through the gateway's worker pool.
///
/// With a checkpoint in `batch`, replies already fetched by an earlier,
/// interrupted run are reused.
pub fn run_batch(
    dataset: &Dataset,
    template: &PromptTemplate,
    gateway: &Gateway,
    config: &RuleConfig,
    annotator_id: &str,
    batch: &BatchOptions,
    options: ExtractOptions,
) -> Result<BatchRun, PipelineError> {
    if dataset.is_empty() {
        return Err(PipelineError::EmptyDataset(dataset.name.clone()));
    }
    let prompts: Vec<String> = dataset
        .sentences
        .iter()
        .map(|s| build_prompt(s, template))
        .collect();
    let replies = gateway.complete_batch(&prompts, batch)?;

    let mut set = AnnotationSet::new(annotator_id, &dataset.name, Provenance::Llm);
    let mut report = FilterReport::default();
    let mut failures = Vec::new();
    let mut unparseable = Vec::new();
    for (sentence, reply) in dataset.sentences.iter().zip(replies) {
        match reply {
            Ok(raw) => {
                let ex = process_response(&raw, config, options);
                if ex.parse_status == ParseStatus::Unparseable {
                    unparseable.push(sentence.id.clone());
                }
                set.insert(&sentence.id, ex.concepts);
                report.merge(ex.report);
            }
            Err(e) => failures.push(SentenceFailure {
                sentence_id: sentence.id.clone(),
                error: e.to_string(),
            }),
        }
    }
    Ok(BatchRun {
        set,
        report,
        failures,
        unparseable,
    })
}

/// Re-run normalization and filtering over an existing set, from the
/// surface forms. Rejected entries stay out.
pub fn refilter(
    set: &AnnotationSet,
    config: &RuleConfig,
    annotator_id: &str,
) -> (AnnotationSet, FilterReport) {
    let mut out = AnnotationSet::new(annotator_id, &set.dataset_name, set.provenance);
    let mut report = FilterReport::default();
    for (id, concepts) in set.iter() {
        let items = concepts
            .iter()
            .filter(|c| c.status != Status::Rejected)
            .map(|c| {
                let mut n = normalize_term(&c.surface, config);
                if n.status != Status::Rejected {
                    n.status = c.status;
                }
                n
            })
            .collect();
        let (kept, r) = post_filter(items, config);
        out.insert(id, kept);
        report.merge(r);
    }
    (out, report)
}

/// Normalize lexicon entries, dropping blanks and duplicates.
pub fn normalize_lexicon<'a>(
    entries: impl IntoIterator<Item = &'a str>,
    config: &RuleConfig,
) -> BTreeSet<String> {
    entries
        .into_iter()
        .map(|e| normalize_term(e, config))
        .filter(|c| c.status != Status::Rejected)
        .map(|c| c.normalized)
        .collect()
}

/// Greedy longest-match lookup of lexicon terms in a sentence.
///
/// Tokens lose edge punctuation, the last token of each window is
/// singularized, and windows are compared case-insensitively. Every match is
/// reported with the lexicon's own spelling.
///
/// ```
/// use std::collections::BTreeSet;
/// use mathcept::concepts::RuleConfig;
/// use mathcept::corpus::Sentence;
/// use mathcept::pipeline::baseline_extract;
///
/// let lexicon: BTreeSet<String> = ["exact category", "category"].map(String::from).into();
/// let s = Sentence::new("0", "in an exact category C");
/// let found = baseline_extract(&s, &lexicon, &RuleConfig::default());
/// assert_eq!(found[0].normalized, "exact category");
/// assert_eq!(found.len(), 1);
/// ```
pub fn baseline_extract(
    sentence: &Sentence,
    lexicon: &BTreeSet<String>,
    config: &RuleConfig,
) -> Vec<Concept> {
    let index: HashMap<String, &String> = lexicon.iter().map(|t| (t.to_lowercase(), t)).collect();
    let longest = lexicon
        .iter()
        .map(|t| t.split_whitespace().count())
        .max()
        .unwrap_or(0);
    let words: Vec<&str> = sentence
        .text
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .collect();

    let mut found: Vec<Concept> = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let mut step = 1;
        for n in (1..=longest.min(words.len() - i)).rev() {
            let window = &words[i..i + n];
            if window.iter().any(|w| w.is_empty()) {
                continue;
            }
            let (last, init) = window.split_last().expect("n >= 1");
            let mut key: Vec<String> = init.iter().map(|w| w.to_lowercase()).collect();
            key.push(singularize(last, config).to_lowercase());
            if let Some(term) = index.get(&key.join(" ")) {
                if !found.iter().any(|c| &c.normalized == *term) {
                    found.push(Concept::accepted(window.join(" "), term.as_str()));
                }
                step = n;
                break;
            }
        }
        i += step;
    }
    found
}

/// [`baseline_extract`] over a dataset.
pub fn baseline_run(
    dataset: &Dataset,
    lexicon: &BTreeSet<String>,
    config: &RuleConfig,
    annotator_id: &str,
) -> AnnotationSet {
    let mut set = AnnotationSet::new(annotator_id, &dataset.name, Provenance::RuleBaseline);
    for s in &dataset.sentences {
        set.insert(&s.id, baseline_extract(s, lexicon, config));
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::Exchange;
    use crate::prompting::TemplateVersion;

    fn cfg() -> RuleConfig {
        RuleConfig::default()
    }

    fn norm_all(items: &[&str]) -> Vec<Concept> {
        items.iter().map(|s| normalize_term(s, &cfg())).collect()
    }

    fn names(cs: &[Concept]) -> Vec<&str> {
        cs.iter().map(|c| c.normalized.as_str()).collect()
    }

    #[test]
    fn meta_word_removed() {
        let (kept, report) = post_filter(norm_all(&["previous work", "Lie algebra"]), &cfg());
        assert_eq!(names(&kept), ["Lie algebra"]);
        assert_eq!(report.removed.len(), 1);
        assert_eq!(report.removed[0].normalized, "previous work");
        assert_eq!(
            report.removed[0].removal_reason,
            Some(RemovalReason::MetaWord)
        );
        assert!(report.is_balanced());
    }

    #[test]
    fn bare_name_removed() {
        let (kept, report) = post_filter(norm_all(&["Grothendieck"]), &cfg());
        assert!(kept.is_empty());
        assert_eq!(
            report.removed[0].removal_reason,
            Some(RemovalReason::BarePersonName)
        );
        let (kept, _) = post_filter(norm_all(&["Grothendieck's construction"]), &cfg());
        assert_eq!(names(&kept), ["Grothendieck's construction"]);
    }

    #[test]
    fn empty_input() {
        let (kept, report) = post_filter(vec![], &cfg());
        assert!(kept.is_empty());
        assert_eq!(report, FilterReport::default());
    }

    #[test]
    fn empties_and_duplicates() {
        let items = vec![
            normalize_term("''", &cfg()),
            Concept::accepted("x", "  "),
            Concept::accepted("functor", "functor"),
            Concept::accepted("functors", "functors"),
            Concept::accepted("functor", "functor"),
        ];
        let (kept, report) = post_filter(items, &cfg());
        assert_eq!(names(&kept), ["functor"]);
        let reasons: Vec<_> = report
            .removed
            .iter()
            .map(|c| c.removal_reason.unwrap())
            .collect();
        assert_eq!(
            reasons,
            [
                RemovalReason::Empty,
                RemovalReason::Empty,
                RemovalReason::PluralArtifact,
                RemovalReason::Duplicate
            ]
        );
        assert!(report.is_balanced());
    }

    #[test]
    fn standalone_adjective_reduced() {
        let (kept, _) = post_filter(norm_all(&["nilpotent case", "abelian"]), &cfg());
        assert_eq!(names(&kept), ["nilpotent", "abelian"]);
    }

    #[test]
    fn prepositional_split_when_enabled() {
        let items = norm_all(&["sheaf of categories of analytic functions", "sheaf"]);
        let mut c = cfg();
        c.split_long_spans = false;
        let (kept, _) = post_filter(items.clone(), &c);
        assert_eq!(
            names(&kept),
            ["sheaf of categories of analytic function", "sheaf"]
        );

        let (kept, report) = post_filter(items, &cfg());
        assert_eq!(names(&kept), ["sheaf", "category", "analytic function"]);
        assert_eq!(report.added.len(), 3);
        let reasons: Vec<_> = report
            .removed
            .iter()
            .map(|c| c.removal_reason.unwrap())
            .collect();
        assert_eq!(
            reasons,
            [RemovalReason::PrepositionalSplit, RemovalReason::Duplicate]
        );
        assert!(report.is_balanced());
    }

    #[test]
    fn split_fragments_are_filtered_too() {
        let (kept, report) =
            post_filter(norm_all(&["proof of the theorem of Grothendieck"]), &cfg());
        assert_eq!(names(&kept), Vec::<&str>::new());
        assert!(report.is_balanced());
        assert_eq!(report.removed.len(), 4);
    }

    #[test]
    fn candidates_keep_status() {
        let (kept, _) = post_filter(vec![Concept::candidate("x", "accessible category")], &cfg());
        assert_eq!(kept[0].status, Status::Candidate);
    }

    const PREORD: &str =
        "Let PreOrd(C) be the category of internal preorders in an exact category C.";
    const ADDITIVE: &str =
        "If the category is additive, we define a sheaf of categories of analytic functions.";

    #[test]
    fn extract_with_cassette() {
        let s = Sentence::new("001", PREORD);
        let t = PromptTemplate::builtin(TemplateVersion::V2);
        let gw = Gateway::replay([Exchange::new(
            &build_prompt(&s, &t),
            "Concepts: ['internal preorder', 'exact category']",
            "stub",
        )]);
        let ex = extract_sentence(&s, &t, &gw, &cfg(), ExtractOptions::default()).unwrap();
        assert_eq!(names(&ex.concepts), ["internal preorder", "exact category"]);
        assert_eq!(ex.parse_status, ParseStatus::Ok);

        let s = Sentence::new("002", ADDITIVE);
        let t = PromptTemplate::builtin(TemplateVersion::V3);
        let gw = Gateway::replay([Exchange::new(
            &build_prompt(&s, &t),
            "Concepts: ['additive category', 'sheaf', 'analytic function']\nReason: the concept 'additive category' is derived from 'the category is additive'.",
            "stub",
        )]);
        let ex = extract_sentence(&s, &t, &gw, &cfg(), ExtractOptions::default()).unwrap();
        assert_eq!(
            names(&ex.concepts),
            ["additive category", "sheaf", "analytic function"]
        );
    }

    #[test]
    fn refusal_is_empty_not_error() {
        let ex = process_response(
            "I'm sorry, I cannot help with that.",
            &cfg(),
            ExtractOptions::default(),
        );
        assert!(ex.concepts.is_empty());
        assert_eq!(ex.parse_status, ParseStatus::Unparseable);
        assert!(!ex.warnings.is_empty());
    }

    #[test]
    fn subspans_on_request() {
        let raw = "Concepts: ['enriched accessible categories']";
        let ex = process_response(
            raw,
            &cfg(),
            ExtractOptions {
                expand_subspans: true,
            },
        );
        assert_eq!(
            names(&ex.concepts),
            [
                "enriched accessible category",
                "accessible category",
                "category"
            ]
        );
        assert_eq!(ex.concepts[1].status, Status::Candidate);
        assert!(ex.report.is_balanced());
        let ex = process_response(raw, &cfg(), ExtractOptions::default());
        assert_eq!(ex.concepts.len(), 1);
    }

    #[test]
    fn cache_miss_propagates() {
        let gw = Gateway::replay([]);
        let s = Sentence::new("0", "x");
        let t = PromptTemplate::builtin(TemplateVersion::V1);
        assert!(matches!(
            extract_sentence(&s, &t, &gw, &cfg(), ExtractOptions::default()),
            Err(GatewayError::CacheMiss { .. })
        ));
    }

    fn dataset(texts: &[&str]) -> Dataset {
        Dataset {
            name: "fx".into(),
            sentences: texts
                .iter()
                .enumerate()
                .map(|(i, t)| Sentence::new(format!("{i:03}"), *t))
                .collect(),
            created_at: chrono::DateTime::UNIX_EPOCH,
        }
    }

    #[test]
    fn batch_keeps_empty_entries_and_reports_failures() {
        let d = dataset(&[PREORD, "We thank the referee.", ADDITIVE]);
        let t = PromptTemplate::builtin(TemplateVersion::V2);
        let replies = [
            "Concepts: ['internal preorders', 'exact category']",
            "Concepts: []",
        ];
        let gw = Gateway::replay(
            d.sentences[..2]
                .iter()
                .zip(replies)
                .map(|(s, r)| Exchange::new(&build_prompt(s, &t), r, "stub")),
        );
        let run = run_batch(
            &d,
            &t,
            &gw,
            &cfg(),
            "gpt",
            &BatchOptions::default(),
            ExtractOptions::default(),
        )
        .unwrap();
        assert_eq!(run.set.provenance, Provenance::Llm);
        assert_eq!(run.set.sentence_count(), 2);
        assert_eq!(run.set.concepts("001"), Some(&[][..]));
        assert_eq!(run.failures.len(), 1);
        assert_eq!(run.failures[0].sentence_id, "002");
        assert!(!run.is_complete());
        assert_eq!(run.report.kept_count, 2);

        let empty = dataset(&[]);
        assert!(matches!(
            run_batch(
                &empty,
                &t,
                &gw,
                &cfg(),
                "gpt",
                &BatchOptions::default(),
                ExtractOptions::default()
            ),
            Err(PipelineError::EmptyDataset(_))
        ));
    }

    #[test]
    fn refilter_from_surface() {
        let mut set = AnnotationSet::new("h1", "fx", Provenance::Human);
        set.insert(
            "000",
            vec![
                Concept::accepted("Functors", "Functors"),
                Concept::accepted("previous work", "previous work"),
                Concept::accepted("x", "x").reject(RemovalReason::AdjudicatedOut),
            ],
        );
        let (out, report) = refilter(&set, &cfg(), "h1-filtered");
        assert_eq!(out.annotator_id, "h1-filtered");
        assert_eq!(names(out.concepts("000").unwrap()), ["functor"]);
        assert_eq!(report.input_count, 2);
    }

    #[test]
    fn baseline_matches() {
        let c = cfg();
        let lex = normalize_lexicon(["functor", "groupoid"], &c);
        let s = Sentence::new("0", "Functors between groupoids may be localised");
        assert_eq!(
            names(&baseline_extract(&s, &lex, &c)),
            ["functor", "groupoid"]
        );
        assert!(baseline_extract(&s, &BTreeSet::new(), &c).is_empty());

        let lex = normalize_lexicon(["exact category", "category"], &c);
        let s = Sentence::new("0", "in an exact category C");
        assert_eq!(names(&baseline_extract(&s, &lex, &c)), ["exact category"]);

        let lex = normalize_lexicon(["Lie algebra", "sheaf"], &c);
        let s = Sentence::new("0", "Sheaves of Lie algebras (and sheaves).");
        let found = baseline_extract(&s, &lex, &c);
        assert_eq!(names(&found), ["sheaf", "Lie algebra"]);
        assert_eq!(found[0].surface, "Sheaves");
    }
}
