use serde::{Deserialize, Serialize};

use super::config::RuleConfig;
use super::{normalize_term, tokens, Concept};

/// How a term relates to the configured person names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NameUsage {
    /// Only names: "Grothendieck".
    BareName,
    /// A leading name followed by more words: "Grothendieck's construction".
    NameBearingConcept,
    NoName,
}

/// True when `term` is a genre word rather than mathematics.
///
/// A term is meta when it is listed in the blacklist, or when its head is
/// listed and every modifier is generic ("this property", "new approach").
/// A listed head with a contentful modifier ("Grothendieck's construction",
/// "category theory") is not meta.
pub fn is_meta_term(term: &str, config: &RuleConfig) -> bool {
    if config.meta_blacklist.contains(term) {
        return true;
    }
    let toks = tokens(term);
    let Some((head, modifiers)) = toks.split_last() else {
        return false;
    };
    !modifiers.is_empty()
        && config.meta_blacklist.contains(&head.to_lowercase())
        && modifiers
            .iter()
            .all(|m| config.generic_modifiers.contains(&m.to_lowercase()))
}

/// For "nilpotent case" (mathematical adjectives + a blacklisted head) the
/// guideline keeps only the adjective. Returns `None` when the rule does not
/// apply.
pub fn standalone_adjective(term: &str, config: &RuleConfig) -> Option<String> {
    let toks = tokens(term);
    let (head, modifiers) = toks.split_last()?;
    if modifiers.is_empty() || !config.meta_blacklist.contains(&head.to_lowercase()) {
        return None;
    }
    modifiers
        .iter()
        .all(|m| config.adjectives.contains(&m.to_lowercase()))
        .then(|| modifiers.join(" "))
}

pub fn classify_name_usage(term: &str, config: &RuleConfig) -> NameUsage {
    let toks = tokens(term);
    let Some(first) = toks.first() else {
        return NameUsage::NoName;
    };
    if toks.iter().all(|t| config.is_person_name(t)) {
        return NameUsage::BareName;
    }
    if config.is_person_name(first) {
        return NameUsage::NameBearingConcept;
    }
    NameUsage::NoName
}

/// Break a term at its prepositions, returning the normalized fragments.
///
/// Fragments lose leading determiners and numerals, and fragments that end
/// up empty are dropped. A term without prepositions, or one listed in
/// `preposition_exceptions`, is returned unchanged as the only element.
///
/// ```
/// use mathcept::concepts::{split_prepositional, RuleConfig};
///
/// let parts = split_prepositional("sheaf of germs of analytic functions", &RuleConfig::default());
/// assert_eq!(parts, ["sheaf", "germ", "analytic function"]);
/// ```
pub fn split_prepositional(term: &str, config: &RuleConfig) -> Vec<String> {
    let toks = tokens(term);
    if config.preposition_exceptions.contains(term)
        || !toks.iter().any(|t| config.is_preposition(t))
    {
        return vec![term.to_string()];
    }
    let mut out: Vec<String> = Vec::new();
    for chunk in toks.split(|t| config.is_preposition(t)) {
        let content: Vec<&str> = chunk
            .iter()
            .copied()
            .skip_while(|t| config.is_determiner(t))
            .collect();
        if content.is_empty() {
            continue;
        }
        let fragment = normalize_term(&content.join(" "), config).normalized;
        if !fragment.is_empty() && !out.contains(&fragment) {
            out.push(fragment);
        }
    }
    out
}

/// Candidate sub-spans of a preposition-free term: the chain of suffixes
/// obtained by dropping the leftmost modifier, down to the bare head.
///
/// Whether a sub-span is sensible takes domain knowledge, so all results
/// are [`Status::Candidate`](super::Status::Candidate).
pub fn expand_subspans(term: &str, _config: &RuleConfig) -> Vec<Concept> {
    let toks = tokens(term);
    (1..toks.len())
        .map(|i| Concept::candidate(term, toks[i..].join(" ")))
        .collect()
}
