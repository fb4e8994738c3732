//! Agreement statistics between annotators: master list, incidence matrix,
//! Jaccard similarity, full agreement and set differences.
//!
//! All functions work on dataset-pooled ("global") sets of normalized
//! forms unless noted. Which concepts count, and whether case is folded, is
//! controlled by [`SetOptions`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::AnnotationSet;
pub use crate::annotation::SetOptions;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AgreementError {
    #[error("no annotation sets given")]
    NoSets,
    #[error("need at least two annotators, got {0}")]
    TooFewSets(usize),
    #[error("Jaccard similarity of two empty sets is undefined")]
    BothEmpty,
    #[error("no concepts in any set; agreement rate is undefined")]
    EmptyUnion,
    #[error("sets belong to different datasets: {0:?} and {1:?}")]
    DatasetMismatch(String, String),
}

/// An exact ratio, rounded only for display.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub numerator: usize,
    pub denominator: usize,
}

impl Ratio {
    pub fn value(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}", self.value())
    }
}

/// |A ∩ B| / |A ∪ B|.
///
/// ```
/// use std::collections::BTreeSet;
/// use mathcept::agreement::jaccard;
///
/// let a: BTreeSet<String> = ["a", "b", "c"].map(String::from).into();
/// let b: BTreeSet<String> = ["b", "c", "d"].map(String::from).into();
/// assert_eq!(jaccard(&a, &b).unwrap().value(), 0.5);
/// ```
pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> Result<Ratio, AgreementError> {
    let common = a.intersection(b).count();
    let union = a.len() + b.len() - common;
    if union == 0 {
        return Err(AgreementError::BothEmpty);
    }
    Ok(Ratio {
        numerator: common,
        denominator: union,
    })
}

pub fn global_sets(sets: &[AnnotationSet], opts: SetOptions) -> Vec<BTreeSet<String>> {
    sets.iter().map(|s| s.global_set(opts)).collect()
}

/// Every counted concept of any annotator, sorted, without repetitions.
pub fn master_list(sets: &[AnnotationSet], opts: SetOptions) -> Vec<String> {
    let union: BTreeSet<String> = global_sets(sets, opts).into_iter().flatten().collect();
    union.into_iter().collect()
}

/// The master list of each sentence, keyed by sentence id.
pub fn master_list_by_sentence(
    sets: &[AnnotationSet],
    opts: SetOptions,
) -> BTreeMap<String, Vec<String>> {
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for set in sets {
        for (id, concepts) in set.iter() {
            let entry = out.entry(id.to_string()).or_default();
            entry.extend(
                concepts
                    .iter()
                    .filter(|c| opts.counts(c))
                    .map(|c| opts.key(&c.normalized)),
            );
        }
    }
    out.into_iter()
        .map(|(k, v)| (k, v.into_iter().collect()))
        .collect()
}

/// Rows are master-list concepts, columns annotators; a cell is 1 when that
/// annotator listed that concept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncidenceMatrix {
    pub concepts: Vec<String>,
    pub annotators: Vec<String>,
    pub cells: Vec<Vec<u8>>,
}

impl IncidenceMatrix {
    pub fn from_sets(named: &[(String, BTreeSet<String>)]) -> Self {
        let concepts: Vec<String> = named
            .iter()
            .flat_map(|(_, s)| s.iter().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let cells = concepts
            .iter()
            .map(|c| named.iter().map(|(_, s)| u8::from(s.contains(c))).collect())
            .collect();
        IncidenceMatrix {
            concepts,
            annotators: named.iter().map(|(n, _)| n.clone()).collect(),
            cells,
        }
    }

    pub fn column_sum(&self, j: usize) -> usize {
        self.cells.iter().map(|row| row[j] as usize).sum()
    }

    /// Jaccard of two columns: rows with both marks over rows with either.
    pub fn jaccard(&self, a: usize, b: usize) -> Result<Ratio, AgreementError> {
        let both = self.cells.iter().filter(|r| r[a] == 1 && r[b] == 1).count();
        let either = self.cells.iter().filter(|r| r[a] == 1 || r[b] == 1).count();
        if either == 0 {
            return Err(AgreementError::BothEmpty);
        }
        Ok(Ratio {
            numerator: both,
            denominator: either,
        })
    }

    /// Rows marked by every annotator.
    pub fn full_rows(&self) -> usize {
        self.cells
            .iter()
            .filter(|r| r.iter().all(|&v| v == 1))
            .count()
    }

    /// Tab-separated rendering with a header row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("concept");
        for a in &self.annotators {
            out.push('\t');
            out.push_str(a);
        }
        out.push('\n');
        for (c, row) in self.concepts.iter().zip(&self.cells) {
            out.push_str(c);
            for v in row {
                out.push('\t');
                out.push_str(if *v == 1 { "1" } else { "0" });
            }
            out.push('\n');
        }
        out
    }
}

pub fn incidence(sets: &[AnnotationSet], opts: SetOptions) -> IncidenceMatrix {
    let named: Vec<(String, BTreeSet<String>)> = sets
        .iter()
        .map(|s| (s.annotator_id.clone(), s.global_set(opts)))
        .collect();
    IncidenceMatrix::from_sets(&named)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FullAgreement {
    pub count: usize,
    pub union_size: usize,
}

impl FullAgreement {
    pub fn rate(&self) -> f64 {
        self.count as f64 / self.union_size as f64
    }
}

/// Concepts listed by all annotators, relative to those listed by any.
pub fn full_agreement(sets: &[BTreeSet<String>]) -> Result<FullAgreement, AgreementError> {
    if sets.len() < 2 {
        return Err(AgreementError::TooFewSets(sets.len()));
    }
    let union: BTreeSet<&String> = sets.iter().flatten().collect();
    if union.is_empty() {
        return Err(AgreementError::EmptyUnion);
    }
    let count = union
        .iter()
        .filter(|c| sets.iter().all(|s| s.contains(**c)))
        .count();
    Ok(FullAgreement {
        count,
        union_size: union.len(),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diff {
    pub only_in_first: Vec<String>,
    pub only_in_second: Vec<String>,
    pub common: Vec<String>,
}

pub fn diff(a: &BTreeSet<String>, b: &BTreeSet<String>) -> Diff {
    Diff {
        only_in_first: a.difference(b).cloned().collect(),
        only_in_second: b.difference(a).cloned().collect(),
        common: a.intersection(b).cloned().collect(),
    }
}

/// [`diff`] of two annotation sets on the same dataset.
pub fn diff_sets(
    a: &AnnotationSet,
    b: &AnnotationSet,
    opts: SetOptions,
) -> Result<Diff, AgreementError> {
    if a.dataset_name != b.dataset_name {
        return Err(AgreementError::DatasetMismatch(
            a.dataset_name.clone(),
            b.dataset_name.clone(),
        ));
    }
    Ok(diff(&a.global_set(opts), &b.global_set(opts)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub a: String,
    pub b: String,
    /// `None` when both sets are empty.
    pub jaccard: Option<f64>,
    pub intersection: usize,
    pub union: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDiff {
    pub a: String,
    pub b: String,
    #[serde(flatten)]
    pub diff: Diff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub annotators: Vec<String>,
    pub counts: BTreeMap<String, usize>,
    pub union_size: usize,
    pub full_agreement_count: usize,
    /// `None` when no annotator listed anything.
    pub full_agreement_rate: Option<f64>,
    pub pairwise_jaccard: Vec<PairScore>,
    pub diffs: Vec<PairDiff>,
}

impl AgreementReport {
    pub fn from_named(named: &[(String, BTreeSet<String>)]) -> Result<Self, AgreementError> {
        if named.len() < 2 {
            return Err(AgreementError::TooFewSets(named.len()));
        }
        let globals: Vec<BTreeSet<String>> = named.iter().map(|(_, s)| s.clone()).collect();
        let union_size = globals.iter().flatten().collect::<BTreeSet<_>>().len();
        let full = full_agreement(&globals).ok();
        let mut pairwise_jaccard = Vec::new();
        let mut diffs = Vec::new();
        for i in 0..named.len() {
            for j in i + 1..named.len() {
                let (a, sa) = &named[i];
                let (b, sb) = &named[j];
                let common = sa.intersection(sb).count();
                pairwise_jaccard.push(PairScore {
                    a: a.clone(),
                    b: b.clone(),
                    jaccard: jaccard(sa, sb).ok().map(|r| r.value()),
                    intersection: common,
                    union: sa.len() + sb.len() - common,
                });
                diffs.push(PairDiff {
                    a: a.clone(),
                    b: b.clone(),
                    diff: diff(sa, sb),
                });
            }
        }
        Ok(AgreementReport {
            annotators: named.iter().map(|(n, _)| n.clone()).collect(),
            counts: named.iter().map(|(n, s)| (n.clone(), s.len())).collect(),
            union_size,
            full_agreement_count: full.map_or(0, |f| f.count),
            full_agreement_rate: full.map(|f| f.rate()),
            pairwise_jaccard,
            diffs,
        })
    }

    pub fn from_sets(sets: &[AnnotationSet], opts: SetOptions) -> Result<Self, AgreementError> {
        if sets.is_empty() {
            return Err(AgreementError::NoSets);
        }
        if let Some(other) = sets.iter().find(|s| s.dataset_name != sets[0].dataset_name) {
            return Err(AgreementError::DatasetMismatch(
                sets[0].dataset_name.clone(),
                other.dataset_name.clone(),
            ));
        }
        let named: Vec<(String, BTreeSet<String>)> = sets
            .iter()
            .map(|s| (s.annotator_id.clone(), s.global_set(opts)))
            .collect();
        Self::from_named(&named)
    }

    /// Plain-text table, one `a and b | 0.123` row per pair.
    pub fn to_table(&self) -> String {
        let mut out = String::from("pair | jaccard\n");
        for p in &self.pairwise_jaccard {
            let value = p.jaccard.map_or("n/a".to_string(), |v| format!("{v:.3}"));
            out.push_str(&format!("{} and {} | {value}\n", p.a, p.b));
        }
        out.push_str("\nannotator | concepts\n");
        for a in &self.annotators {
            out.push_str(&format!("{a} | {}\n", self.counts[a]));
        }
        out.push_str(&format!("union | {}\n", self.union_size));
        let rate = self
            .full_agreement_rate
            .map_or("n/a".to_string(), |r| format!("{r:.3}"));
        out.push_str(&format!(
            "full agreement | {} ({rate})\n",
            self.full_agreement_count
        ));
        out
    }
}
