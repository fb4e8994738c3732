//! Prompt construction and concept-list response parsing.
//!
//! Three template generations are built in:
//!
//! * [`TemplateVersion::V1`]: the bare instruction plus plain in-context examples;
//! * [`TemplateVersion::V2`]: adds the singular, daily-English, and person-name
//!   instruction paragraphs;
//! * [`TemplateVersion::V3`]: the v2 instructions with reasoned examples.
//!
//! Custom templates load from text files containing the `{in-context example}`
//! and `{math_sentence}` placeholders.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Sentence;

pub const EXAMPLES_PLACEHOLDER: &str = "{in-context example}";
pub const SENTENCE_PLACEHOLDER: &str = "{math_sentence}";

const INSTRUCTION: &str =
    "Given the following Context, extract the words that denote Math concepts.";

pub const SINGULAR_PARAGRAPH: &str = "Be sure to make the concept words singular. For example when we see 'functors' in a sentence, we would extract 'functor' rather than 'functors' or when we see 'categories' we would like to extract 'category' instead of 'categories'!";

pub const DAILY_ENGLISH_PARAGRAPH: &str = "Also note that we are looking for concepts like modulation, enriched orthogonality, holonomy, localization, variety, but not words shown in daily English sentences like 'future work', 'conclusion', 'this property'!";

pub const PERSON_NAME_PARAGRAPH: &str = "We don't want a person's name to be extracted as a math concept although we understand that a person's name could be part of the phrase that denotes a math concept.";

const SOLVE: &str = "Now please solve the following problem.";

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("template is missing the {0} placeholder")]
    MissingPlaceholder(&'static str),
    #[error("template must end with the \"Concepts:\" cue")]
    MissingCue,
    #[error("example {index}: {message}")]
    BadExample { index: usize, message: String },
    #[error("unknown template version {0:?} (expected v1, v2 or v3)")]
    UnknownVersion(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateVersion {
    V1,
    V2,
    V3,
}

impl FromStr for TemplateVersion {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "v1" | "1" => Ok(TemplateVersion::V1),
            "v2" | "2" => Ok(TemplateVersion::V2),
            "v3" | "3" => Ok(TemplateVersion::V3),
            _ => Err(TemplateError::UnknownVersion(s.to_string())),
        }
    }
}

impl fmt::Display for TemplateVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemplateVersion::V1 => "v1",
            TemplateVersion::V2 => "v2",
            TemplateVersion::V3 => "v3",
        })
    }
}

/// A worked (context, concepts) demonstration, optionally with its reasoning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InContextExample {
    pub context: String,
    pub concepts: Vec<String>,
    pub reason: Option<String>,
}

impl InContextExample {
    fn render(&self) -> String {
        let mut out = format!(
            "Context: '{}'\nConcepts: {}",
            self.context,
            render_concept_list(&self.concepts)
        );
        if let Some(reason) = &self.reason {
            out.push_str("\n\nReason: ");
            out.push_str(reason);
        }
        out
    }
}

/// The plain demonstration used by the v1 and v2 prompts.
pub fn plain_example() -> InContextExample {
    InContextExample {
        context: "Let PreOrd(C) be the category of internal preorders in an exact category C."
            .to_string(),
        concepts: vec![
            "internal preorder".to_string(),
            "exact category".to_string(),
        ],
        reason: None,
    }
}

/// The reasoned demonstration used by the v3 prompt.
pub fn reasoned_example() -> InContextExample {
    InContextExample {
        context: "If the category is additive, we define a sheaf of categories of analytic functions."
            .to_string(),
        concepts: vec![
            "additive category".to_string(),
            "sheaf".to_string(),
            "analytic function".to_string(),
        ],
        reason: Some(
            [
                "the concept 'additive category' is generalized from the sentence because of the original phrase 'category is additive';",
                "the concept 'sheaf' is a known math concept shown in the sentence;",
                "the concept 'analytic function' is extracted from the original phrase 'analytic functions' by removing the plural form;",
                "here we don't want the single 'category' and 'additive' extracted as math concepts since they are usual words",
                "nor do we want the phrase 'category of analytic functions' since the more concise phrase 'analytic function'",
                "should be extracted instead as a math concept.",
            ]
            .join("\n"),
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub version: TemplateVersion,
    /// Full template text with both placeholders, ending in `Concepts:`.
    pub instruction_text: String,
    pub in_context_examples: Vec<InContextExample>,
}

impl PromptTemplate {
    /// The built-in template of the given generation with its shipped example.
    pub fn builtin(version: TemplateVersion) -> Self {
        let (text, example) = match version {
            TemplateVersion::V1 => (
                format!(
                    "{INSTRUCTION}\n\nHere are some examples:\n{EXAMPLES_PLACEHOLDER}\n\n{SOLVE}\n\nContext: {SENTENCE_PLACEHOLDER}\nConcepts:"
                ),
                plain_example(),
            ),
            TemplateVersion::V2 => (detailed_instruction(), plain_example()),
            TemplateVersion::V3 => (detailed_instruction(), reasoned_example()),
        };
        PromptTemplate {
            version,
            instruction_text: text,
            in_context_examples: vec![example],
        }
    }

    /// Build and validate a template from its parts.
    pub fn new(
        version: TemplateVersion,
        instruction_text: impl Into<String>,
        in_context_examples: Vec<InContextExample>,
    ) -> Result<Self, TemplateError> {
        let template = PromptTemplate {
            version,
            instruction_text: instruction_text.into(),
            in_context_examples,
        };
        template.validate()?;
        Ok(template)
    }

    /// Load a template text file and, optionally, an example bank file.
    /// Without a bank the built-in example for `version` is used.
    pub fn from_files(
        version: TemplateVersion,
        template_path: &Path,
        examples_path: Option<&Path>,
    ) -> Result<Self, TemplateError> {
        let text = read(template_path)?;
        let examples = match examples_path {
            Some(p) => parse_example_bank(&read(p)?)?,
            None => PromptTemplate::builtin(version).in_context_examples,
        };
        PromptTemplate::new(version, text.trim_end(), examples)
    }

    fn validate(&self) -> Result<(), TemplateError> {
        if !self.instruction_text.contains(SENTENCE_PLACEHOLDER) {
            return Err(TemplateError::MissingPlaceholder(SENTENCE_PLACEHOLDER));
        }
        if !self.instruction_text.contains(EXAMPLES_PLACEHOLDER) {
            return Err(TemplateError::MissingPlaceholder(EXAMPLES_PLACEHOLDER));
        }
        if !self.instruction_text.trim_end().ends_with("Concepts:") {
            return Err(TemplateError::MissingCue);
        }
        for (index, ex) in self.in_context_examples.iter().enumerate() {
            match (self.version, &ex.reason) {
                (TemplateVersion::V1, Some(_)) => {
                    return Err(TemplateError::BadExample {
                        index,
                        message: "v1 examples carry no reason".into(),
                    })
                }
                (TemplateVersion::V3, None) => {
                    return Err(TemplateError::BadExample {
                        index,
                        message: "v3 examples need a reason".into(),
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn detailed_instruction() -> String {
    format!(
        "{INSTRUCTION}\n{SINGULAR_PARAGRAPH}\n\nHere are some examples:\n{EXAMPLES_PLACEHOLDER}\n\n{DAILY_ENGLISH_PARAGRAPH}\n\n{PERSON_NAME_PARAGRAPH}\n\n{SOLVE}\n\nContext: {SENTENCE_PLACEHOLDER}\nConcepts:"
    )
}

fn read(path: &Path) -> Result<String, TemplateError> {
    fs::read_to_string(path).map_err(|source| TemplateError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Render the prompt for one sentence. Deterministic: identical inputs give
/// identical bytes.
///
/// ```
/// use mathcept::corpus::Sentence;
/// use mathcept::prompting::{build_prompt, PromptTemplate, TemplateVersion};
///
/// let s = Sentence::new("000", "Functors between groupoids may be localised at equivalences in two ways.");
/// let prompt = build_prompt(&s, &PromptTemplate::builtin(TemplateVersion::V1));
/// assert!(prompt.ends_with("Concepts:"));
/// ```
pub fn build_prompt(sentence: &Sentence, template: &PromptTemplate) -> String {
    let sentence_text = format!("'{}'", sentence.text);
    let text = if template.in_context_examples.is_empty() {
        warn!(
            "template {} has no in-context examples; prompting zero-shot",
            template.version
        );
        let kept: Vec<&str> = template
            .instruction_text
            .lines()
            .filter(|l| {
                let t = l.trim();
                t != "Here are some examples:" && t != EXAMPLES_PLACEHOLDER
            })
            .collect();
        collapse_blank_runs(&kept.join("\n"))
    } else {
        let examples = template
            .in_context_examples
            .iter()
            .map(InContextExample::render)
            .collect::<Vec<_>>()
            .join("\n\n");
        template
            .instruction_text
            .replace(EXAMPLES_PLACEHOLDER, &examples)
    };
    text.replace(SENTENCE_PLACEHOLDER, &sentence_text)
        .trim_end()
        .to_string()
}

fn collapse_blank_runs(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut blank = 0;
    for line in text.lines() {
        if line.trim().is_empty() {
            blank += 1;
            if blank > 1 {
                continue;
            }
        } else {
            blank = 0;
        }
        out.push_str(line);
        out.push('\n');
    }
    out
}

/// Parse an example bank: blocks of `Context:` / `Concepts:` lines separated
/// by blank lines. A block starting with `Reason:` attaches to the example
/// before it, and reason text may continue over several lines.
pub fn parse_example_bank(text: &str) -> Result<Vec<InContextExample>, TemplateError> {
    let mut examples: Vec<InContextExample> = Vec::new();
    let blocks = text
        .split("\n\n")
        .map(str::trim)
        .filter(|b| !b.is_empty() && !b.starts_with('#'));
    for block in blocks {
        if let Some(reason) = block.strip_prefix("Reason:") {
            let index = examples.len().saturating_sub(1);
            let Some(last) = examples.last_mut() else {
                return Err(TemplateError::BadExample {
                    index,
                    message: "Reason: block without a preceding example".into(),
                });
            };
            last.reason = Some(reason.trim().to_string());
            continue;
        }
        let index = examples.len();
        let mut context = None;
        let mut concepts = None;
        for line in block.lines() {
            let line = line.trim();
            if let Some(c) = line.strip_prefix("Context:") {
                context = Some(unquote(c.trim()).to_string());
            } else if let Some(c) = line.strip_prefix("Concepts:") {
                let parsed = parse_concepts(c);
                if parsed.parse_status == ParseStatus::Unparseable {
                    return Err(TemplateError::BadExample {
                        index,
                        message: format!("cannot parse concept list {c:?}"),
                    });
                }
                concepts = Some(parsed.parsed_concepts);
            } else {
                return Err(TemplateError::BadExample {
                    index,
                    message: format!("unexpected line {line:?}"),
                });
            }
        }
        match (context, concepts) {
            (Some(context), Some(concepts)) => examples.push(InContextExample {
                context,
                concepts,
                reason: None,
            }),
            _ => {
                return Err(TemplateError::BadExample {
                    index,
                    message: "needs both Context: and Concepts: lines".into(),
                })
            }
        }
    }
    Ok(examples)
}

fn unquote(s: &str) -> &str {
    let mut chars = s.chars();
    match (chars.next(), chars.next_back()) {
        (Some(a), Some(b)) if is_quote(a) && is_quote(b) => chars.as_str(),
        _ => s,
    }
}

/// Render a list the way a Python `repr` of a list of strings looks:
/// single quotes, or double quotes for items containing an apostrophe.
pub fn render_concept_list(items: &[String]) -> String {
    let inner = items
        .iter()
        .map(|item| {
            if item.contains('\'') && !item.contains('"') {
                format!("\"{item}\"")
            } else {
                format!("'{item}'")
            }
        })
        .collect::<Vec<_>>()
        .join(", ");
    format!("[{inner}]")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseStatus {
    Ok,
    Empty,
    Unparseable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub raw_text: String,
    pub parsed_concepts: Vec<String>,
    pub parse_status: ParseStatus,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

fn is_quote(c: char) -> bool {
    matches!(
        c,
        '\'' | '"' | '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}'
    )
}

fn closes(open: char, c: char) -> bool {
    match open {
        '\u{2018}' | '\u{2019}' => matches!(c, '\u{2019}' | '\'' | '\u{2018}'),
        '\u{201C}' | '\u{201D}' => matches!(c, '\u{201D}' | '"' | '\u{201C}'),
        _ => c == open,
    }
}

/// Extract the concept list from a model reply.
///
/// The first bracketed list after an optional `Concepts:` label wins;
/// anything after it, such as a `Reason:` paragraph, is ignored. An item
/// quote only closes when the next non-blank character is `,` or `]`, so
/// `'Grothendieck's construction'` survives intact.
///
/// ```
/// use mathcept::prompting::{parse_concepts, ParseStatus};
///
/// let r = parse_concepts("Concepts: ['internal preorder', 'exact category']");
/// assert_eq!(r.parse_status, ParseStatus::Ok);
/// assert_eq!(r.parsed_concepts, ["internal preorder", "exact category"]);
/// ```
pub fn parse_concepts(raw: &str) -> LlmResponse {
    let mut warnings = Vec::new();
    let search_from = find_label(raw).unwrap_or(0);
    let Some(open) = raw[search_from..].find('[').map(|i| i + search_from) else {
        return LlmResponse {
            raw_text: raw.to_string(),
            parsed_concepts: Vec::new(),
            parse_status: ParseStatus::Unparseable,
            warnings,
        };
    };
    match scan_list(&raw[open + 1..]) {
        Some((items, consumed)) => {
            let rest = &raw[open + 1 + consumed..];
            if rest.contains('[') && rest.contains(']') {
                warn!("reply contains more than one bracketed list; using the first");
                warnings.push("multiple bracketed lists; later lists ignored".to_string());
            }
            let status = if items.is_empty() {
                ParseStatus::Empty
            } else {
                ParseStatus::Ok
            };
            LlmResponse {
                raw_text: raw.to_string(),
                parsed_concepts: items,
                parse_status: status,
                warnings,
            }
        }
        None => {
            warnings.push("unterminated concept list".to_string());
            LlmResponse {
                raw_text: raw.to_string(),
                parsed_concepts: Vec::new(),
                parse_status: ParseStatus::Unparseable,
                warnings,
            }
        }
    }
}

fn find_label(raw: &str) -> Option<usize> {
    let lower = raw.to_ascii_lowercase();
    lower.find("concepts:").map(|i| i + "concepts:".len())
}

/// Scan list items after the opening bracket. Returns the items and the
/// number of bytes consumed through the closing bracket.
fn scan_list(s: &str) -> Option<(Vec<String>, usize)> {
    let chars: Vec<(usize, char)> = s.char_indices().collect();
    let mut items = Vec::new();
    let mut i = 0;
    let skip_ws = |mut i: usize| {
        while i < chars.len() && chars[i].1.is_whitespace() {
            i += 1;
        }
        i
    };
    loop {
        i = skip_ws(i);
        let (_, c) = *chars.get(i)?;
        if c == ']' {
            return Some((items, chars[i].0 + 1));
        }
        if c == ',' {
            i += 1;
            continue;
        }
        if is_quote(c) {
            let open = c;
            let start = i + 1;
            let mut j = start;
            let close = loop {
                let (_, d) = *chars.get(j)?;
                if closes(open, d) {
                    let k = skip_ws(j + 1);
                    match chars.get(k) {
                        Some((_, ',')) | Some((_, ']')) => break j,
                        None => return None,
                        _ => {}
                    }
                }
                j += 1;
            };
            let from = chars[start].0;
            let to = chars[close].0;
            let item = if start == close { "" } else { &s[from..to] };
            if !item.is_empty() {
                items.push(item.to_string());
            }
            i = close + 1;
        } else {
            let start = chars[i].0;
            let mut j = i;
            while j < chars.len() && chars[j].1 != ',' && chars[j].1 != ']' {
                j += 1;
            }
            let end = chars.get(j).map(|c| c.0).unwrap_or(s.len());
            let item = s[start..end].trim();
            if !item.is_empty() {
                items.push(item.to_string());
            }
            i = j;
        }
    }
}
