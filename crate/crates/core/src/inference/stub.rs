//! Deterministic stand-in for a language model.
//!
//! Picks the option whose distinct tokens overlap most with the evidence
//! (documents plus any auxiliary answer) in the prompt. Ties go to the
//! earliest option; a prompt with no options is answered "A".

use std::collections::HashSet;

use super::prompt::{parse_prompt, PromptTemplate};
use super::{Generator, InferenceError, InferenceRequest, InferenceResponse};
use crate::embedding::tokenize;

pub const STUB_BACKEND_ID: &str = "stub-overlap";

#[derive(Debug, Clone, Default)]
pub struct StubGenerator {
    template: PromptTemplate,
}

impl StubGenerator {
    pub fn new(template: PromptTemplate) -> Self {
        Self { template }
    }

    /// The answer text for a prompt: `"<label>) <option text>"`.
    pub fn answer(&self, prompt: &str) -> String {
        let parsed = parse_prompt(&self.template, prompt);
        let evidence: HashSet<String> = parsed
            .evidence
            .iter()
            .flat_map(|e| tokenize(e))
            .collect();
        let mut best: Option<(&str, &str, usize)> = None;
        for (label, text) in &parsed.options {
            let tokens: HashSet<String> = tokenize(text).into_iter().collect();
            let score = tokens.iter().filter(|t| evidence.contains(*t)).count();
            if best.is_none_or(|(_, _, s)| score > s) {
                best = Some((label, text, score));
            }
        }
        match best {
            Some((label, "", _)) => label.to_string(),
            Some((label, text, _)) => format!("{label}) {text}"),
            None => "A".to_string(),
        }
    }
}

impl Generator for StubGenerator {
    fn backend_id(&self) -> &str {
        STUB_BACKEND_ID
    }

    fn generate(&self, req: &InferenceRequest) -> Result<InferenceResponse, InferenceError> {
        Ok(InferenceResponse {
            text: self.answer(&req.prompt),
            backend_id: STUB_BACKEND_ID.to_string(),
            latency_ms: 0,
            token_counts: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::prompt::render_prompt;
    use crate::inference::{AnswerOption, Question};

    fn question(opts: &[(&str, &str)]) -> Question {
        Question {
            text: "Which one?".into(),
            options: opts.iter().map(|(l, t)| AnswerOption::new(*l, *t)).collect(),
        }
    }

    #[test]
    fn documents_repeating_option_b_pick_b() {
        let t = PromptTemplate::default();
        let q = question(&[("A", "heparin infusion"), ("B", "oral warfarin"), ("C", "aspirin")]);
        let p = render_prompt(&t, &["Patients on oral warfarin need INR checks.", "unrelated"], &q, None)
            .unwrap();
        assert_eq!(StubGenerator::new(t).answer(&p), "B) oral warfarin");
    }

    #[test]
    fn ties_and_degenerate_prompts_pick_first() {
        let t = PromptTemplate::default();
        let q = question(&[("A", "alpha"), ("B", "beta")]);
        let p = render_prompt(&t, &["nothing relevant"], &q, None).unwrap();
        assert_eq!(StubGenerator::new(t.clone()).answer(&p), "A) alpha");

        let empty = question(&[]);
        let p = render_prompt(&t, &["text"], &empty, None).unwrap();
        assert_eq!(StubGenerator::new(t).answer(&p), "A");
    }

    #[test]
    fn counts_distinct_tokens() {
        let t = PromptTemplate::default();
        let q = question(&[("A", "red red red"), ("B", "red blue")]);
        let p = render_prompt(&t, &["red blue"], &q, None).unwrap();
        assert_eq!(StubGenerator::new(t).answer(&p), "B) red blue");
    }
}
