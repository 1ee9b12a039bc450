//! Question-set JSONL: `{"qid", "question", "options": {label: text}, "gold"}`.
//!
//! Labels are "A".."D", or "yes"/"no"/"maybe" which map to "A"/"B"/"C".
//! `"answer"` is accepted in place of `"gold"`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{AnswerOption, Question};

const LETTERS: [&str; 4] = ["A", "B", "C", "D"];
const YES_NO_MAYBE: [&str; 3] = ["yes", "no", "maybe"];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QuestionError {
    #[error("cannot read question file: {0}")]
    Io(String),
    #[error("question file has no questions")]
    Empty,
    #[error("line {line}: {reason}")]
    Invalid { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkQuestion {
    pub qid: String,
    pub question: Question,
    pub gold: String,
}

#[derive(Deserialize)]
struct RawQuestion {
    qid: String,
    question: String,
    options: BTreeMap<String, String>,
    #[serde(alias = "answer")]
    gold: String,
}

fn normalize_label(label: &str) -> Option<&'static str> {
    if let Some(i) = YES_NO_MAYBE.iter().position(|l| l.eq_ignore_ascii_case(label)) {
        return Some(LETTERS[i]);
    }
    LETTERS.iter().copied().find(|l| *l == label)
}

pub fn parse_question(line: &str) -> Result<BenchmarkQuestion, String> {
    let raw: RawQuestion = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if !(2..=4).contains(&raw.options.len()) {
        return Err(format!("expected 2 to 4 options, found {}", raw.options.len()));
    }
    let mut options: Vec<AnswerOption> = Vec::with_capacity(raw.options.len());
    for (label, text) in &raw.options {
        let mapped = normalize_label(label).ok_or_else(|| format!("unknown option label {label:?}"))?;
        if options.iter().any(|o| o.label == mapped) {
            return Err(format!("option label {label:?} maps to a label already used"));
        }
        options.push(AnswerOption::new(mapped, text.clone()));
    }
    options.sort_by(|a, b| a.label.cmp(&b.label));
    let gold = normalize_label(raw.gold.trim()).ok_or_else(|| format!("unknown gold label {:?}", raw.gold))?;
    if !options.iter().any(|o| o.label == gold) {
        return Err(format!("gold label {gold} is not an option"));
    }
    if raw.question.trim().is_empty() {
        return Err("question text is empty".into());
    }
    Ok(BenchmarkQuestion {
        qid: raw.qid,
        question: Question {
            text: raw.question,
            options,
        },
        gold: gold.to_string(),
    })
}

pub fn parse_questions(text: &str) -> Result<Vec<BenchmarkQuestion>, QuestionError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let q = parse_question(line).map_err(|reason| QuestionError::Invalid { line: i + 1, reason })?;
        if out.iter().any(|p: &BenchmarkQuestion| p.qid == q.qid) {
            return Err(QuestionError::Invalid {
                line: i + 1,
                reason: format!("duplicate qid {}", q.qid),
            });
        }
        out.push(q);
    }
    if out.is_empty() {
        return Err(QuestionError::Empty);
    }
    Ok(out)
}

pub fn load_questions(path: &Path) -> Result<Vec<BenchmarkQuestion>, QuestionError> {
    let text = fs::read_to_string(path).map_err(|e| QuestionError::Io(format!("{}: {e}", path.display())))?;
    parse_questions(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lettered_options() {
        let q = parse_question(r#"{"qid":"1","question":"Q?","options":{"B":"two","A":"one","C":"three"},"gold":"C"}"#)
            .unwrap();
        let labels: Vec<&str> = q.question.options.iter().map(|o| o.label.as_str()).collect();
        assert_eq!(labels, ["A", "B", "C"]);
        assert_eq!(q.gold, "C");
    }

    #[test]
    fn yes_no_maybe_maps_to_abc() {
        let q = parse_question(
            r#"{"qid":"p","question":"Does it?","options":{"yes":"yes","no":"no","maybe":"maybe"},"answer":"maybe"}"#,
        )
        .unwrap();
        let pairs: Vec<(&str, &str)> = q
            .question
            .options
            .iter()
            .map(|o| (o.label.as_str(), o.text.as_str()))
            .collect();
        assert_eq!(pairs, [("A", "yes"), ("B", "no"), ("C", "maybe")]);
        assert_eq!(q.gold, "C");
    }

    #[test]
    fn rejects_bad_sets() {
        assert!(parse_question(r#"{"qid":"1","question":"Q","options":{"A":"x"},"gold":"A"}"#).is_err());
        assert!(parse_question(r#"{"qid":"1","question":"Q","options":{"A":"x","B":"y"},"gold":"C"}"#).is_err());
        assert!(parse_question(r#"{"qid":"1","question":"Q","options":{"A":"x","Z":"y"},"gold":"A"}"#).is_err());
        assert_eq!(parse_questions("\n\n"), Err(QuestionError::Empty));
        let dup = "{\"qid\":\"1\",\"question\":\"Q\",\"options\":{\"A\":\"x\",\"B\":\"y\"},\"gold\":\"A\"}\n";
        assert!(matches!(
            parse_questions(&dup.repeat(2)),
            Err(QuestionError::Invalid { line: 2, .. })
        ));
    }
}
