//! Sequential benchmark execution over a federation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::questions::BenchmarkQuestion;
use crate::index::DocId;
use crate::inference::extract::{extract_answer, ExtractionRule};
use crate::inference::InferenceMode;
use crate::protocol::{FederationError, Server};

/// Largest tolerated share of questions without enough responders, in
/// percent.
pub const MAX_INSUFFICIENT_PERCENT: usize = 10;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("no questions to run")]
    Empty,
    #[error("aborted: {insufficient} of {total} questions had too few responders")]
    Aborted { insufficient: usize, total: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub qid: String,
    pub predicted: Option<String>,
    pub gold: String,
    pub correct: bool,
    pub total_ms: u64,
    pub responders: usize,
    pub fused_doc_ids: Vec<DocId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rule: Option<ExtractionRule>,
    pub flagged: bool,
    pub degraded: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRun {
    pub dataset_name: String,
    pub mode: InferenceMode,
    pub per_question: Vec<QuestionResult>,
    pub correct: usize,
    pub total: usize,
    /// `correct / total`.
    pub accuracy: f64,
    /// Mean of `total_ms` over all questions.
    pub mean_time_ms: f64,
    pub total_time_ms: u64,
}

impl BenchmarkRun {
    pub fn from_results(dataset_name: &str, mode: InferenceMode, per_question: Vec<QuestionResult>) -> Self {
        let total = per_question.len();
        let correct = per_question.iter().filter(|q| q.correct).count();
        let total_time_ms: u64 = per_question.iter().map(|q| q.total_ms).sum();
        let (accuracy, mean_time_ms) = if total == 0 {
            (0.0, 0.0)
        } else {
            (correct as f64 / total as f64, total_time_ms as f64 / total as f64)
        };
        Self {
            dataset_name: dataset_name.to_string(),
            mode,
            per_question,
            correct,
            total,
            accuracy,
            mean_time_ms,
            total_time_ms,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run serializes")
    }
}

/// Runs every question through `server` in order. The question text is the
/// retrieval query. Inference failures count as incorrect; too many
/// questions without enough responders abort the run.
pub fn run_benchmark(
    server: &Server,
    dataset_name: &str,
    questions: &[BenchmarkQuestion],
    mode: InferenceMode,
) -> Result<BenchmarkRun, BenchError> {
    if questions.is_empty() {
        return Err(BenchError::Empty);
    }
    let mut results = Vec::with_capacity(questions.len());
    let mut insufficient = 0;
    for q in questions {
        let started = server.now_ms();
        let result = match server.handle_query_as(&q.question, mode) {
            Ok(record) => {
                let extraction = extract_answer(&record.answer_text, &q.question.options);
                QuestionResult {
                    qid: q.qid.clone(),
                    correct: extraction.label == q.gold,
                    predicted: Some(extraction.label),
                    gold: q.gold.clone(),
                    total_ms: record.total_ms,
                    responders: record.responders.len(),
                    fused_doc_ids: record.fused_context.doc_ids(),
                    rule: Some(extraction.rule),
                    flagged: extraction.flagged,
                    degraded: record.degraded,
                    error: None,
                }
            }
            Err(e) => {
                if matches!(e, FederationError::InsufficientResponders { .. }) {
                    insufficient += 1;
                    if insufficient * 100 > questions.len() * MAX_INSUFFICIENT_PERCENT {
                        return Err(BenchError::Aborted {
                            insufficient,
                            total: questions.len(),
                        });
                    }
                }
                tracing::warn!(qid = %q.qid, error = %e, "question failed");
                QuestionResult {
                    qid: q.qid.clone(),
                    predicted: None,
                    gold: q.gold.clone(),
                    correct: false,
                    total_ms: server.now_ms().saturating_sub(started),
                    responders: 0,
                    fused_doc_ids: Vec::new(),
                    rule: None,
                    flagged: false,
                    degraded: false,
                    error: Some(e.code().to_string()),
                }
            }
        };
        results.push(result);
    }
    Ok(BenchmarkRun::from_results(dataset_name, mode, results))
}
