//! Concept type and the annotation-guideline normalizer.
//!
//! Everything here is a pure function of its input and a read-only
//! [`RuleConfig`]. The guideline rules are:
//!
//! * concepts are listed in the singular ([`singularize`]);
//! * genre words such as *theorem* or *previous work* are not concepts
//!   ([`is_meta_term`]);
//! * a bare person name is not a concept, a name inside a concept is
//!   ([`classify_name_usage`]);
//! * prepositional phrases are split into their parts
//!   ([`split_prepositional`]);
//! * long spans suggest shorter candidate sub-spans ([`expand_subspans`]).

mod config;
mod rules;
mod singular;

use serde::{Deserialize, Serialize};

pub use config::{parse_word_list, ConfigError, RuleConfig};
pub use rules::{
    classify_name_usage, expand_subspans, is_meta_term, split_prepositional, standalone_adjective,
    NameUsage,
};
pub use singular::singularize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Accepted,
    Candidate,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalReason {
    /// Collapsed into an existing concept once its plural was removed.
    PluralArtifact,
    MetaWord,
    BarePersonName,
    Empty,
    Duplicate,
    AdjudicatedOut,
    /// Replaced by the fragments around its prepositions.
    PrepositionalSplit,
}

impl RemovalReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RemovalReason::PluralArtifact => "plural_artifact",
            RemovalReason::MetaWord => "meta_word",
            RemovalReason::BarePersonName => "bare_person_name",
            RemovalReason::Empty => "empty",
            RemovalReason::Duplicate => "duplicate",
            RemovalReason::AdjudicatedOut => "adjudicated_out",
            RemovalReason::PrepositionalSplit => "prepositional_split",
        }
    }
}

/// One extracted term: what the annotator wrote and its canonical form.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Concept {
    pub surface: String,
    pub normalized: String,
    pub status: Status,
    #[serde(rename = "reason", default, skip_serializing_if = "Option::is_none")]
    pub removal_reason: Option<RemovalReason>,
}

impl Concept {
    pub fn accepted(surface: impl Into<String>, normalized: impl Into<String>) -> Self {
        Concept {
            surface: surface.into(),
            normalized: normalized.into(),
            status: Status::Accepted,
            removal_reason: None,
        }
    }

    pub fn candidate(surface: impl Into<String>, normalized: impl Into<String>) -> Self {
        Concept {
            status: Status::Candidate,
            ..Concept::accepted(surface, normalized)
        }
    }

    pub fn reject(mut self, reason: RemovalReason) -> Self {
        self.status = Status::Rejected;
        self.removal_reason = Some(reason);
        self
    }

    pub fn is_accepted(&self) -> bool {
        self.status == Status::Accepted
    }
}

const QUOTES: &[char] = &[
    '\'', '"', '`', '\u{2018}', '\u{2019}', '\u{201C}', '\u{201D}',
];

/// Trim, unwrap quotes, and collapse internal whitespace. No case or
/// number changes.
pub fn clean_surface(surface: &str) -> String {
    let mut s = surface.trim();
    loop {
        let mut chars = s.chars();
        match (chars.next(), chars.next_back()) {
            (Some(a), Some(b)) if QUOTES.contains(&a) && QUOTES.contains(&b) => {
                s = chars.as_str().trim();
            }
            (Some(a), None) if QUOTES.contains(&a) => s = "",
            _ => break,
        }
    }
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Apply the full guideline cleanup to one annotator- or model-produced term.
///
/// The first token is lowercased only when it carries a plain
/// sentence-initial capital and is not a listed person name, so
/// `"Functors"` becomes `"functor"` while `"Lie algebras"` becomes
/// `"Lie algebra"`.
///
/// ```
/// use mathcept::concepts::{normalize_term, RuleConfig, Status};
///
/// let cfg = RuleConfig::default();
/// assert_eq!(normalize_term("  Lie algebras ", &cfg).normalized, "Lie algebra");
/// assert_eq!(normalize_term("''", &cfg).status, Status::Rejected);
/// ```
pub fn normalize_term(surface: &str, config: &RuleConfig) -> Concept {
    let cleaned = clean_surface(surface);
    if cleaned.is_empty() {
        return Concept::accepted(surface, "").reject(RemovalReason::Empty);
    }
    let (first, rest) = match cleaned.split_once(' ') {
        Some((f, r)) => (f, Some(r)),
        None => (cleaned.as_str(), None),
    };
    let first = if should_lowercase(first, config) {
        first.to_lowercase()
    } else {
        first.to_string()
    };
    let joined = match rest {
        Some(r) => format!("{first} {r}"),
        None => first,
    };
    Concept::accepted(surface, singularize(&joined, config))
}

fn should_lowercase(token: &str, config: &RuleConfig) -> bool {
    let mut chars = token.chars();
    let Some(first) = chars.next() else {
        return false;
    };
    first.is_uppercase()
        && chars.clone().next().is_some()
        && !chars.any(char::is_uppercase)
        && !config.is_person_name(token)
}

/// Split on whitespace; terms are normalized so this is a plain token list.
pub(crate) fn tokens(term: &str) -> Vec<&str> {
    term.split_whitespace().collect()
}
