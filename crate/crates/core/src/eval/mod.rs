//! Corpus ingestion, benchmark runs and Table-1-style reporting.

pub mod bench;
pub mod ingest;
pub mod questions;
pub mod report;

pub use bench::{run_benchmark, BenchError, BenchmarkRun, QuestionResult};
pub use ingest::{ingest_corpus, load_silo, read_snippets, IngestError, IngestReport};
pub use questions::{load_questions, parse_questions, BenchmarkQuestion, QuestionError};
pub use report::{Report, TimeUnit};
