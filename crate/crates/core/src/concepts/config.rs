//! Rule configuration for the concept normalizer.
//!
//! Every word list ships with a built-in default (see `data/`). A TOML
//! config file may replace a list (`<list> = [...]` or `<list>_file =
//! "path"`) or extend it (`extra_<list> = [...]`). External list files are
//! newline-delimited; `#` starts a comment line.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use super::singular;

const DEFAULT_META_BLACKLIST: &str = include_str!("../../data/meta_blacklist.txt");
const DEFAULT_IRREGULAR_PLURALS: &str = include_str!("../../data/irregular_plurals.txt");
const DEFAULT_INVARIANT_NOUNS: &str = include_str!("../../data/invariant_nouns.txt");
const DEFAULT_PREPOSITIONS: &str = include_str!("../../data/prepositions.txt");
const DEFAULT_PREPOSITION_EXCEPTIONS: &str = include_str!("../../data/preposition_exceptions.txt");
const DEFAULT_PERSON_NAMES: &str = include_str!("../../data/person_names.txt");
const DEFAULT_ADJECTIVES: &str = include_str!("../../data/adjectives.txt");
const DEFAULT_DETERMINERS: &str = include_str!("../../data/determiners.txt");
const DEFAULT_GENERIC_MODIFIERS: &str = include_str!("../../data/generic_modifiers.txt");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Toml {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("{path}:{line}: expected `plural singular`, got {text:?}")]
    IrregularLine {
        path: String,
        line: usize,
        text: String,
    },
}

/// Read-only rule tables used by every normalization operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleConfig {
    /// Normalized terms that carry no mathematical content.
    pub meta_blacklist: BTreeSet<String>,
    /// Lowercase plural token to singular token.
    pub irregular_plurals: BTreeMap<String, String>,
    /// Lowercase tokens that `singularize` never touches.
    pub invariant_nouns: BTreeSet<String>,
    pub preposition_list: BTreeSet<String>,
    /// Full normalized spans that keep their preposition.
    pub preposition_exceptions: BTreeSet<String>,
    /// Case-sensitive person names.
    pub person_names: BTreeSet<String>,
    pub adjectives: BTreeSet<String>,
    pub determiners: BTreeSet<String>,
    pub generic_modifiers: BTreeSet<String>,
    pub split_long_spans: bool,
}

impl Default for RuleConfig {
    fn default() -> Self {
        let raw = RuleConfig {
            meta_blacklist: parse_word_list(DEFAULT_META_BLACKLIST),
            irregular_plurals: parse_irregulars(DEFAULT_IRREGULAR_PLURALS, "<builtin>")
                .expect("builtin irregular plural table is well formed"),
            invariant_nouns: lowercase(parse_word_list(DEFAULT_INVARIANT_NOUNS)),
            preposition_list: lowercase(parse_word_list(DEFAULT_PREPOSITIONS)),
            preposition_exceptions: parse_word_list(DEFAULT_PREPOSITION_EXCEPTIONS),
            person_names: parse_word_list(DEFAULT_PERSON_NAMES),
            adjectives: lowercase(parse_word_list(DEFAULT_ADJECTIVES)),
            determiners: lowercase(parse_word_list(DEFAULT_DETERMINERS)),
            generic_modifiers: lowercase(parse_word_list(DEFAULT_GENERIC_MODIFIERS)),
            split_long_spans: true,
        };
        raw.finish()
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    split_long_spans: Option<bool>,

    meta_blacklist: Option<Vec<String>>,
    meta_blacklist_file: Option<PathBuf>,
    #[serde(default)]
    extra_meta_blacklist: Vec<String>,

    irregular_plurals: Option<BTreeMap<String, String>>,
    irregular_plurals_file: Option<PathBuf>,
    #[serde(default)]
    extra_irregular_plurals: BTreeMap<String, String>,

    invariant_nouns: Option<Vec<String>>,
    invariant_nouns_file: Option<PathBuf>,
    #[serde(default)]
    extra_invariant_nouns: Vec<String>,

    prepositions: Option<Vec<String>>,
    prepositions_file: Option<PathBuf>,
    #[serde(default)]
    extra_prepositions: Vec<String>,

    preposition_exceptions: Option<Vec<String>>,
    preposition_exceptions_file: Option<PathBuf>,
    #[serde(default)]
    extra_preposition_exceptions: Vec<String>,

    person_names: Option<Vec<String>>,
    person_names_file: Option<PathBuf>,
    #[serde(default)]
    extra_person_names: Vec<String>,

    adjectives: Option<Vec<String>>,
    adjectives_file: Option<PathBuf>,
    #[serde(default)]
    extra_adjectives: Vec<String>,

    determiners: Option<Vec<String>>,
    determiners_file: Option<PathBuf>,
    #[serde(default)]
    extra_determiners: Vec<String>,

    generic_modifiers: Option<Vec<String>>,
    generic_modifiers_file: Option<PathBuf>,
    #[serde(default)]
    extra_generic_modifiers: Vec<String>,
}

impl RuleConfig {
    /// Load a TOML config, layering it over the built-in defaults.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let file: ConfigFile = toml::from_str(&text).map_err(|source| ConfigError::Toml {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_parts(file, base)
    }

    /// Parse a TOML config from a string; relative list paths resolve against `base`.
    pub fn from_toml_str(text: &str, base: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let file: ConfigFile = toml::from_str(text).map_err(|source| ConfigError::Toml {
            path: PathBuf::from("<inline>"),
            source,
        })?;
        Self::from_parts(file, base.as_ref())
    }

    fn from_parts(file: ConfigFile, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg = RuleConfig::default();
        if let Some(split) = file.split_long_spans {
            cfg.split_long_spans = split;
        }

        layer(
            &mut cfg.meta_blacklist,
            file.meta_blacklist,
            file.meta_blacklist_file,
            file.extra_meta_blacklist,
            base,
            false,
        )?;
        layer(
            &mut cfg.invariant_nouns,
            file.invariant_nouns,
            file.invariant_nouns_file,
            file.extra_invariant_nouns,
            base,
            true,
        )?;
        layer(
            &mut cfg.preposition_list,
            file.prepositions,
            file.prepositions_file,
            file.extra_prepositions,
            base,
            true,
        )?;
        layer(
            &mut cfg.preposition_exceptions,
            file.preposition_exceptions,
            file.preposition_exceptions_file,
            file.extra_preposition_exceptions,
            base,
            false,
        )?;
        layer(
            &mut cfg.person_names,
            file.person_names,
            file.person_names_file,
            file.extra_person_names,
            base,
            false,
        )?;
        layer(
            &mut cfg.adjectives,
            file.adjectives,
            file.adjectives_file,
            file.extra_adjectives,
            base,
            true,
        )?;
        layer(
            &mut cfg.determiners,
            file.determiners,
            file.determiners_file,
            file.extra_determiners,
            base,
            true,
        )?;
        layer(
            &mut cfg.generic_modifiers,
            file.generic_modifiers,
            file.generic_modifiers_file,
            file.extra_generic_modifiers,
            base,
            true,
        )?;

        if let Some(map) = file.irregular_plurals {
            cfg.irregular_plurals = lowercase_map(map);
        }
        if let Some(p) = file.irregular_plurals_file {
            let p = base.join(p);
            let text = read(&p)?;
            cfg.irregular_plurals = parse_irregulars(&text, &p.display().to_string())?;
        }
        cfg.irregular_plurals
            .extend(lowercase_map(file.extra_irregular_plurals));

        Ok(cfg.finish())
    }

    /// Enforce the table invariants: blacklist and exception entries are
    /// stored in normalized form.
    fn finish(mut self) -> Self {
        let blacklist = std::mem::take(&mut self.meta_blacklist);
        self.meta_blacklist = blacklist
            .iter()
            .map(|t| super::normalize_term(t, &self).normalized)
            .filter(|t| !t.is_empty())
            .collect();
        let exceptions = std::mem::take(&mut self.preposition_exceptions);
        self.preposition_exceptions = exceptions
            .iter()
            .map(|t| super::normalize_term(t, &self).normalized)
            .filter(|t| !t.is_empty())
            .collect();
        self
    }

    /// True when `token` (possessive stripped) is a listed person name.
    pub fn is_person_name(&self, token: &str) -> bool {
        self.person_names.contains(strip_possessive(token))
    }

    pub fn is_preposition(&self, token: &str) -> bool {
        self.preposition_list.contains(&token.to_lowercase())
    }

    pub fn is_determiner(&self, token: &str) -> bool {
        self.determiners.contains(&token.to_lowercase())
    }

    pub(crate) fn singular_of(&self, lower: &str) -> Option<&str> {
        self.irregular_plurals.get(lower).map(String::as_str)
    }

    pub(crate) fn is_invariant(&self, lower: &str) -> bool {
        self.invariant_nouns.contains(lower)
            || self.irregular_plurals.values().any(|s| s == lower)
            || singular::ends_with_ignore_case(lower, "ics")
    }
}

/// `Grothendieck's` -> `Grothendieck`, `Gauss'` -> `Gauss`.
pub(crate) fn strip_possessive(token: &str) -> &str {
    for suffix in ["'s", "\u{2019}s", "'", "\u{2019}"] {
        if let Some(base) = token.strip_suffix(suffix) {
            if !base.is_empty() {
                return base;
            }
        }
    }
    token
}

fn read(path: &Path) -> Result<String, ConfigError> {
    fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn layer(
    target: &mut BTreeSet<String>,
    inline: Option<Vec<String>>,
    file: Option<PathBuf>,
    extra: Vec<String>,
    base: &Path,
    fold_case: bool,
) -> Result<(), ConfigError> {
    let fold = |s: String| if fold_case { s.to_lowercase() } else { s };
    if let Some(items) = inline {
        *target = items
            .into_iter()
            .map(|s| fold(s.trim().to_string()))
            .collect();
    }
    if let Some(p) = file {
        let text = read(&base.join(p))?;
        *target = parse_word_list(&text).into_iter().map(fold).collect();
    }
    target.extend(extra.into_iter().map(|s| fold(s.trim().to_string())));
    target.retain(|s| !s.is_empty());
    Ok(())
}

/// Parse a newline-delimited list, dropping blanks and `#` comments.
pub fn parse_word_list(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
        .collect()
}

fn parse_irregulars(text: &str, path: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(plural), Some(single), None) => {
                map.insert(plural.to_lowercase(), single.to_lowercase());
            }
            _ => {
                return Err(ConfigError::IrregularLine {
                    path: path.to_string(),
                    line: i + 1,
                    text: line.to_string(),
                })
            }
        }
    }
    Ok(map)
}

fn lowercase(set: BTreeSet<String>) -> BTreeSet<String> {
    set.into_iter().map(|s| s.to_lowercase()).collect()
}

fn lowercase_map(map: BTreeMap<String, String>) -> BTreeMap<String, String> {
    map.into_iter()
        .map(|(k, v)| (k.to_lowercase(), v.to_lowercase()))
        .collect()
}
