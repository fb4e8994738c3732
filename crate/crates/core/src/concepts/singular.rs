//! Rule-based singularization of the final token of a term.

use super::config::RuleConfig;

/// Singularize the head (final token) of `term`; all other tokens are left as is.
///
/// Irregular forms come from the config table; regular forms follow the
/// suffix rules `-ies → -y`, `-sses/-xes/-ches/-shes → drop "es"`, and
/// `-s → drop "s"`. Tokens ending in `ics`, `ss`, `us` or `is`, listed
/// invariant nouns, and possessives are unchanged. For hyphenated tokens
/// only the segment after the last hyphen is inspected.
pub fn singularize(term: &str, config: &RuleConfig) -> String {
    let Some(start) = last_token_start(term) else {
        return term.to_string();
    };
    let (prefix, token) = term.split_at(start);
    let head = singularize_token(token, config);
    let mut out = String::with_capacity(term.len());
    out.push_str(prefix);
    out.push_str(&head);
    out
}

fn last_token_start(term: &str) -> Option<usize> {
    // Callers pass normalized terms; anything with trailing blanks is left alone.
    if term.is_empty() || term.ends_with(char::is_whitespace) {
        return None;
    }
    Some(
        term.char_indices()
            .rev()
            .find(|(_, c)| c.is_whitespace())
            .map(|(i, c)| i + c.len_utf8())
            .unwrap_or(0),
    )
}

fn singularize_token(token: &str, config: &RuleConfig) -> String {
    let (lead, word) = match token.rfind('-') {
        Some(i) if i + 1 < token.len() => token.split_at(i + 1),
        _ => ("", token),
    };
    let mut out = String::from(lead);
    out.push_str(&singularize_word(word, config));
    out
}

fn singularize_word(word: &str, config: &RuleConfig) -> String {
    let out = apply_rules(word, config);
    if out != word {
        // "criterias" -> "criteria" is itself an irregular plural.
        if let Some(single) = config.singular_of(&out.to_lowercase()) {
            return match_case(&out, single);
        }
    }
    out
}

fn apply_rules(word: &str, config: &RuleConfig) -> String {
    if word.contains('\'') || word.contains('\u{2019}') {
        return word.to_string();
    }
    let lower = word.to_lowercase();
    if let Some(single) = config.singular_of(&lower) {
        return match_case(word, single);
    }
    if lower.chars().count() <= 2 || config.is_invariant(&lower) {
        return word.to_string();
    }
    if !word.is_ascii() {
        // Suffix rules are byte-based; only the final ASCII 's' can be dropped.
        return match word.strip_suffix('s') {
            Some(stem) if !stem.ends_with(['s', 'S']) && !stem.is_empty() => stem.to_string(),
            _ => word.to_string(),
        };
    }
    for keep in ["ss", "us", "is"] {
        if ends_with_ignore_case(word, keep) {
            return word.to_string();
        }
    }
    if ends_with_ignore_case(word, "ies") && word.len() > 3 {
        let stem = &word[..word.len() - 3];
        let y = if word.ends_with("IES") { "Y" } else { "y" };
        return format!("{stem}{y}");
    }
    for suffix in ["sses", "xes", "ches", "shes"] {
        if ends_with_ignore_case(word, suffix) {
            return word[..word.len() - 2].to_string();
        }
    }
    if ends_with_ignore_case(word, "s") {
        return word[..word.len() - 1].to_string();
    }
    word.to_string()
}

pub(crate) fn ends_with_ignore_case(word: &str, suffix: &str) -> bool {
    word.len() >= suffix.len()
        && word.is_char_boundary(word.len() - suffix.len())
        && word[word.len() - suffix.len()..].eq_ignore_ascii_case(suffix)
}

/// Carry a leading capital over to a table-provided replacement.
fn match_case(original: &str, replacement: &str) -> String {
    let mut chars = original.chars();
    match chars.next() {
        Some(c) if c.is_uppercase() && chars.all(|c| !c.is_uppercase()) => {
            let mut r = replacement.chars();
            match r.next() {
                Some(first) => first.to_uppercase().chain(r).collect(),
                None => String::new(),
            }
        }
        _ => replacement.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(t: &str) -> String {
        singularize(t, &RuleConfig::default())
    }

    #[test]
    fn worked_examples() {
        assert_eq!(s("functors"), "functor");
        assert_eq!(s("equivalent bicategories"), "equivalent bicategory");
        assert_eq!(s("group"), "group");
        assert_eq!(s("sheaves"), "sheaf");
        assert_eq!(s("analytic functions"), "analytic function");
        assert_eq!(s("categories"), "category");
    }

    #[test]
    fn suffix_rules() {
        assert_eq!(s("classes"), "class");
        assert_eq!(s("complexes"), "complex");
        assert_eq!(s("branches"), "branch");
        assert_eq!(s("meshes"), "mesh");
        assert_eq!(s("monoids"), "monoid");
        assert_eq!(s("pretopologies"), "pretopology");
    }

    #[test]
    fn only_head_changes() {
        assert_eq!(s("sheaves of groups"), "sheaves of group");
        assert_eq!(s("wiring diagrams"), "wiring diagram");
    }

    #[test]
    fn left_alone() {
        for w in [
            "mathematics",
            "dynamics",
            "class",
            "calculus",
            "basis",
            "topos",
            "series",
            "continuous",
            "Grothendieck's",
            "Gauss'",
            "as",
            "2-functor",
        ] {
            assert_eq!(s(w), w, "{w}");
        }
    }

    #[test]
    fn hyphenated_and_capitalized() {
        assert_eq!(s("counter-examples"), "counter-example");
        assert_eq!(s("quasi-categories"), "quasi-category");
        assert_eq!(s("pre-sheaves"), "pre-sheaf");
        assert_eq!(s("Sheaves"), "Sheaf");
        assert_eq!(s("DGAs"), "DGA");
        assert_eq!(s("Lie algebras"), "Lie algebra");
    }

    #[test]
    fn degenerate_input() {
        assert_eq!(s(""), "");
        assert_eq!(s("   "), "   ");
        assert_eq!(s("s"), "s");
        assert_eq!(s("état"), "état");
        assert_eq!(s("états"), "état");
    }
}
