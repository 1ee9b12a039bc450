//! Maps free-form model output to an option label.
//!
//! Rules, first match wins:
//! 1. the first token is a label, optionally followed by `)`, `.` or `:`;
//! 2. "answer is X" or "option X", case-insensitive;
//! 3. exactly one option's text occurs in the response (case-insensitive);
//! 4. fallback to "A", flagged.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::AnswerOption;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionRule {
    LeadingLabel,
    Phrase,
    OptionText,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extraction {
    pub label: String,
    pub rule: ExtractionRule,
    pub flagged: bool,
}

pub const FALLBACK_LABEL: &str = "A";

fn phrase_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\b(?:answer\s+is|option)\s*:?\s*\(?([a-z0-9]+)\)?").expect("valid regex")
    })
}

fn find_label<'a>(options: &'a [AnswerOption], candidate: &str) -> Option<&'a str> {
    options
        .iter()
        .find(|o| o.label == candidate)
        .or_else(|| options.iter().find(|o| o.label.eq_ignore_ascii_case(candidate)))
        .map(|o| o.label.as_str())
}

pub fn extract_answer(response: &str, options: &[AnswerOption]) -> Extraction {
    let hit = |label: &str, rule| Extraction {
        label: label.to_string(),
        rule,
        flagged: false,
    };

    if let Some(first) = response.split_whitespace().next() {
        let token = first
            .strip_suffix(')')
            .or_else(|| first.strip_suffix('.'))
            .or_else(|| first.strip_suffix(':'))
            .unwrap_or(first);
        if let Some(o) = options.iter().find(|o| o.label == token) {
            return hit(&o.label, ExtractionRule::LeadingLabel);
        }
    }

    for cap in phrase_re().captures_iter(response) {
        if let Some(label) = find_label(options, &cap[1]) {
            return hit(label, ExtractionRule::Phrase);
        }
    }

    let lower = response.to_lowercase();
    let matches: Vec<&AnswerOption> = options
        .iter()
        .filter(|o| !o.text.trim().is_empty() && lower.contains(&o.text.trim().to_lowercase()))
        .collect();
    if let [only] = matches.as_slice() {
        return hit(&only.label, ExtractionRule::OptionText);
    }

    Extraction {
        label: FALLBACK_LABEL.to_string(),
        rule: ExtractionRule::Fallback,
        flagged: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn abcd() -> Vec<AnswerOption> {
        vec![
            AnswerOption::new("A", "heparin"),
            AnswerOption::new("B", "warfarin"),
            AnswerOption::new("C", "aspirin"),
            AnswerOption::new("D", "clopidogrel"),
        ]
    }

    fn ynm() -> Vec<AnswerOption> {
        vec![
            AnswerOption::new("A", "yes"),
            AnswerOption::new("B", "no"),
            AnswerOption::new("C", "maybe"),
        ]
    }

    #[test]
    fn leading_label() {
        assert_eq!(extract_answer("B) no", &ynm()).label, "B");
        assert_eq!(extract_answer("  C.", &ynm()).label, "C");
        assert_eq!(extract_answer("A: yes", &ynm()).rule, ExtractionRule::LeadingLabel);
    }

    #[test]
    fn answer_phrase() {
        let e = extract_answer("The correct answer is C because of the data", &abcd());
        assert_eq!((e.label.as_str(), e.rule), ("C", ExtractionRule::Phrase));
        assert_eq!(extract_answer("I would choose option (d) here", &abcd()).label, "D");
    }

    #[test]
    fn unique_option_text() {
        let e = extract_answer("Most guidelines recommend warfarin for this.", &abcd());
        assert_eq!((e.label.as_str(), e.rule), ("B", ExtractionRule::OptionText));
        // Two options mentioned: not unique, so fall back.
        let e = extract_answer("either heparin or warfarin", &abcd());
        assert_eq!(e.rule, ExtractionRule::Fallback);
        assert!(e.flagged);
    }

    #[test]
    fn fallback_is_flagged() {
        let e = extract_answer("I cannot tell.", &abcd());
        assert_eq!(e.label, "A");
        assert!(e.flagged);
        assert!(extract_answer("", &abcd()).flagged);
    }

    proptest! {
        #[test]
        fn total_and_deterministic(s in "\\PC{0,80}") {
            let a = extract_answer(&s, &abcd());
            let b = extract_answer(&s, &abcd());
            prop_assert!(["A", "B", "C", "D"].contains(&a.label.as_str()));
            prop_assert_eq!(a, b);
        }
    }
}
