//! Prompt rendering and parsing.
//!
//! Layout (blank lines between blocks):
//!
//! ```text
//! <role preamble>
//!
//! Here are the relevant documents:
//!
//! Document 1: ...
//! Document n: ...
//!
//! Auxiliary answer from external model:      (cascading only)
//! <aux text>
//!
//! Question:
//! <question>
//!
//! Options:
//! A) ...
//!
//! Answer only with the correct option
//! ```
//!
//! Every embedded text is collapsed onto one line so the layout can be
//! parsed back unambiguously.

use serde::{Deserialize, Serialize};

use super::{AuxiliaryAnswer, InferenceError, Question};
use crate::fusion::FusedContext;

pub const DEFAULT_TEMPLATE_ID: &str = "default-v1";
pub const AUX_HEADER: &str = "Auxiliary answer from external model:";
pub const DEFAULT_MAX_DOC_CHARS: usize = 1200;
const ELLIPSIS: &str = "...";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub role_preamble: String,
    pub docs_header: String,
    pub question_header: String,
    pub options_header: String,
    pub answer_instruction: String,
    pub max_doc_chars: usize,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            id: DEFAULT_TEMPLATE_ID.to_string(),
            role_preamble: "You are a medical expert answering an exam question. Use the \
                            documents below as evidence and pick the single best option."
                .to_string(),
            docs_header: "Here are the relevant documents:".to_string(),
            question_header: "Question:".to_string(),
            options_header: "Options:".to_string(),
            answer_instruction: "Answer only with the correct option".to_string(),
            max_doc_chars: DEFAULT_MAX_DOC_CHARS,
        }
    }
}

/// Collapses whitespace runs to single spaces and trims.
pub fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Cuts `text` to at most `max_chars` characters, breaking at a whitespace
/// boundary and ending with `...` when anything was removed.
pub fn truncate_doc(text: &str, max_chars: usize) -> String {
    if text.chars().count() <= max_chars {
        return text.to_string();
    }
    let budget = max_chars.saturating_sub(ELLIPSIS.len());
    let prefix: String = text.chars().take(budget).collect();
    let cut = match prefix.rfind(char::is_whitespace) {
        Some(pos) if pos > 0 => prefix[..pos].trim_end(),
        _ => prefix.as_str(),
    };
    format!("{cut}{ELLIPSIS}")
}

/// Renders the generation prompt from document texts in context order.
pub fn render_prompt(
    template: &PromptTemplate,
    docs: &[&str],
    question: &Question,
    aux: Option<&AuxiliaryAnswer>,
) -> Result<String, InferenceError> {
    if docs.is_empty() {
        return Err(InferenceError::EmptyContext);
    }
    let mut out = String::new();
    out.push_str(&one_line(&template.role_preamble));
    out.push_str("\n\n");
    out.push_str(&template.docs_header);
    out.push_str("\n\n");
    for (i, doc) in docs.iter().enumerate() {
        let text = truncate_doc(&one_line(doc), template.max_doc_chars);
        out.push_str(&format!("Document {}: {}\n", i + 1, text));
    }
    out.push('\n');
    if let Some(aux) = aux {
        out.push_str(AUX_HEADER);
        out.push('\n');
        out.push_str(&one_line(&aux.answer_text));
        out.push_str("\n\n");
    }
    push_question_block(&mut out, template, question);
    Ok(out)
}

/// Builds the prompt for a fused context. Documents keep fused order.
pub fn build_prompt(
    template: &PromptTemplate,
    fused: &FusedContext,
    question: &Question,
    aux: Option<&AuxiliaryAnswer>,
) -> Result<String, InferenceError> {
    let docs: Vec<&str> = fused.documents.iter().map(|d| d.text.as_str()).collect();
    render_prompt(template, &docs, question, aux)
}

/// Question and options only: what an untrusted provider gets to see.
pub fn build_provider_prompt(template: &PromptTemplate, question: &Question) -> String {
    let mut out = String::new();
    push_question_block(&mut out, template, question);
    out
}

fn push_question_block(out: &mut String, template: &PromptTemplate, question: &Question) {
    out.push_str(&template.question_header);
    out.push('\n');
    out.push_str(&one_line(&question.text));
    out.push_str("\n\n");
    if !question.options.is_empty() {
        out.push_str(&template.options_header);
        out.push('\n');
        for opt in &question.options {
            out.push_str(&format!("{}) {}\n", opt.label, one_line(&opt.text)));
        }
        out.push('\n');
    }
    out.push_str(&template.answer_instruction);
}

/// What a prompt says, recovered from its text.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedPrompt {
    /// Document texts and auxiliary answer, without numbering or headers.
    pub evidence: Vec<String>,
    /// `(label, text)` in prompt order.
    pub options: Vec<(String, String)>,
}

pub fn parse_prompt(template: &PromptTemplate, prompt: &str) -> ParsedPrompt {
    #[derive(PartialEq)]
    enum Section {
        Preamble,
        Evidence,
        Question,
        Options,
        Done,
    }
    let mut parsed = ParsedPrompt::default();
    let mut section = Section::Preamble;
    for line in prompt.lines() {
        let trimmed = line.trim();
        if trimmed == template.docs_header {
            section = Section::Evidence;
            continue;
        }
        if trimmed == template.question_header {
            section = Section::Question;
            continue;
        }
        if trimmed == template.options_header && section == Section::Question {
            section = Section::Options;
            continue;
        }
        if trimmed == template.answer_instruction {
            section = Section::Done;
            continue;
        }
        if trimmed.is_empty() {
            continue;
        }
        match section {
            Section::Evidence => {
                if trimmed == AUX_HEADER {
                    continue;
                }
                parsed.evidence.push(strip_doc_number(trimmed).to_string());
            }
            Section::Options => {
                if let Some((label, text)) = trimmed.split_once(") ") {
                    if !label.is_empty() && !label.contains(char::is_whitespace) {
                        parsed.options.push((label.to_string(), text.to_string()));
                    }
                } else if let Some(label) = trimmed.strip_suffix(')') {
                    parsed.options.push((label.to_string(), String::new()));
                }
            }
            _ => {}
        }
    }
    parsed
}

fn strip_doc_number(line: &str) -> &str {
    let Some(rest) = line.strip_prefix("Document ") else {
        return line;
    };
    match rest.split_once(": ") {
        Some((n, text)) if n.chars().all(|c| c.is_ascii_digit()) && !n.is_empty() => text,
        _ => line,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::AnswerOption;

    fn q() -> Question {
        Question {
            text: "Does a discharge coordinator help?".into(),
            options: vec![
                AnswerOption::new("A", "yes"),
                AnswerOption::new("B", "no"),
                AnswerOption::new("C", "maybe"),
            ],
        }
    }

    #[test]
    fn layout_has_headers_numbering_and_instruction() {
        let t = PromptTemplate::default();
        let p = render_prompt(&t, &["first doc", "second\ndoc"], &q(), None).unwrap();
        assert!(p.contains("Here are the relevant documents:\n\nDocument 1: first doc\nDocument 2: second doc\n"));
        assert!(p.contains("Question:\nDoes a discharge coordinator help?\n\nOptions:\nA) yes\nB) no\nC) maybe\n\n"));
        assert!(p.ends_with("Answer only with the correct option"));
        assert!(!p.contains(AUX_HEADER));
    }

    #[test]
    fn aux_goes_between_documents_and_question() {
        let t = PromptTemplate::default();
        let aux = AuxiliaryAnswer {
            provider_id: "p".into(),
            answer_text: "B) no".into(),
            latency_ms: 0,
        };
        let p = render_prompt(&t, &["doc"], &q(), Some(&aux)).unwrap();
        let docs = p.find("Document 1:").unwrap();
        let aux_at = p.find(AUX_HEADER).unwrap();
        let question = p.find("Question:").unwrap();
        assert!(docs < aux_at && aux_at < question);
    }

    #[test]
    fn empty_context_is_an_error() {
        let t = PromptTemplate::default();
        assert!(matches!(render_prompt(&t, &[], &q(), None), Err(InferenceError::EmptyContext)));
    }

    #[test]
    fn long_documents_are_truncated_on_whitespace() {
        let words: Vec<String> = (0..1300).map(|i| format!("w{i}")).collect();
        let doc = words.join(" ");
        assert!(doc.len() >= 5000);
        let cut = truncate_doc(&doc, 1200);
        assert!(cut.chars().count() <= 1200);
        assert!(cut.ends_with("..."));
        let body = cut.trim_end_matches("...");
        assert!(doc.starts_with(body));
        assert!(doc[body.len()..].starts_with(' '));

        let solid = "x".repeat(5000);
        let cut = truncate_doc(&solid, 1200);
        assert_eq!(cut.chars().count(), 1200);
        assert_eq!(truncate_doc("short", 1200), "short");
    }

    #[test]
    fn parse_recovers_evidence_and_options() {
        let t = PromptTemplate::default();
        let aux = AuxiliaryAnswer {
            provider_id: "p".into(),
            answer_text: "maybe".into(),
            latency_ms: 0,
        };
        let p = render_prompt(&t, &["alpha beta", "gamma"], &q(), Some(&aux)).unwrap();
        let parsed = parse_prompt(&t, &p);
        assert_eq!(parsed.evidence, vec!["alpha beta", "gamma", "maybe"]);
        assert_eq!(
            parsed.options,
            vec![
                ("A".to_string(), "yes".to_string()),
                ("B".to_string(), "no".to_string()),
                ("C".to_string(), "maybe".to_string())
            ]
        );
    }

    #[test]
    fn provider_prompt_has_no_documents() {
        let t = PromptTemplate::default();
        let p = build_provider_prompt(&t, &q());
        assert!(p.starts_with("Question:\n"));
        assert!(!p.contains("Document"));
        assert!(!p.contains(&t.docs_header));
    }
}
