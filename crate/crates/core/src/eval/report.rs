//! Mode × dataset table of mean time and accuracy.
//!
//! Values are rounded half-to-even from exact integer ratios, never from
//! the floating-point fields.

use serde::{Deserialize, Serialize};

use super::bench::BenchmarkRun;
use crate::inference::InferenceMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeUnit {
    Milliseconds,
    Seconds,
}

impl TimeUnit {
    pub fn suffix(&self) -> &'static str {
        match self {
            Self::Milliseconds => "ms",
            Self::Seconds => "s",
        }
    }
}

pub fn mode_label(mode: InferenceMode) -> &'static str {
    match mode {
        InferenceMode::Standalone => "Standalone Inference",
        InferenceMode::Cascading => "Cascaded Inference",
        InferenceMode::Confidential => "Confidential Inference",
    }
}

/// `num / den` rounded half-to-even to `decimals` places.
pub fn round_half_even(num: u128, den: u128, decimals: u32) -> String {
    assert!(den > 0, "zero denominator");
    let scale = 10u128.pow(decimals);
    let scaled = num * scale;
    let mut q = scaled / den;
    let r = scaled % den;
    if 2 * r > den || (2 * r == den && q % 2 == 1) {
        q += 1;
    }
    if decimals == 0 {
        return q.to_string();
    }
    format!("{}.{:0width$}", q / scale, q % scale, width = decimals as usize)
}

pub fn format_accuracy(run: &BenchmarkRun) -> String {
    if run.total == 0 {
        return "n/a".into();
    }
    round_half_even(run.correct as u128, run.total as u128, 2)
}

pub fn format_time(run: &BenchmarkRun, unit: TimeUnit) -> String {
    if run.total == 0 {
        return "n/a".into();
    }
    let den = match unit {
        TimeUnit::Milliseconds => run.total as u128,
        TimeUnit::Seconds => run.total as u128 * 1000,
    };
    format!("{}{}", round_half_even(run.total_time_ms as u128, den, 0), unit.suffix())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub dataset: String,
    pub time: String,
    pub accuracy: String,
    pub mean_time_ms: f64,
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub mode: InferenceMode,
    pub label: String,
    pub cells: Vec<ReportCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub unit: TimeUnit,
    pub datasets: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl Report {
    /// Rows follow standalone, cascaded, confidential order; datasets keep
    /// their first-seen order. Modes without runs are omitted.
    pub fn build(runs: &[BenchmarkRun], unit: TimeUnit) -> Self {
        let mut datasets: Vec<String> = Vec::new();
        for r in runs {
            if !datasets.contains(&r.dataset_name) {
                datasets.push(r.dataset_name.clone());
            }
        }
        let rows = InferenceMode::ALL
            .iter()
            .filter(|m| runs.iter().any(|r| r.mode == **m))
            .map(|&mode| ReportRow {
                mode,
                label: mode_label(mode).to_string(),
                cells: datasets
                    .iter()
                    .map(|d| match runs.iter().find(|r| r.mode == mode && &r.dataset_name == d) {
                        Some(run) => ReportCell {
                            dataset: d.clone(),
                            time: format_time(run, unit),
                            accuracy: format_accuracy(run),
                            mean_time_ms: run.mean_time_ms,
                            correct: run.correct,
                            total: run.total,
                        },
                        None => ReportCell {
                            dataset: d.clone(),
                            time: "-".into(),
                            accuracy: "-".into(),
                            mean_time_ms: 0.0,
                            correct: 0,
                            total: 0,
                        },
                    })
                    .collect(),
            })
            .collect();
        Self { unit, datasets, rows }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table.
    pub fn render(&self) -> String {
        const CORNER: &str = "Mode \\ Dataset";
        let first = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .chain([CORNER.len()])
            .max()
            .unwrap_or(0);
        let mut widths: Vec<(usize, usize)> = Vec::new();
        for (i, d) in self.datasets.iter().enumerate() {
            let time = self.rows.iter().map(|r| r.cells[i].time.len()).chain(["Time".len()]).max().unwrap_or(4);
            let acc = self
                .rows
                .iter()
                .map(|r| r.cells[i].accuracy.len())
                .chain(["Accuracy".len()])
                .max()
                .unwrap_or(8);
            let inner = time + 3 + acc;
            let extra = d.len().saturating_sub(inner);
            widths.push((time + extra, acc));
        }

        let mut out = String::new();
        out.push_str(&format!("| {CORNER:<first$} |"));
        for (d, (t, a)) in self.datasets.iter().zip(&widths) {
            out.push_str(&format!(" {d:^w$} |", w = t + 3 + a));
        }
        out.push('\n');
        out.push_str(&format!("| {:<first$} |", ""));
        for (t, a) in &widths {
            out.push_str(&format!(" {:<t$} | {:<a$} |", "Time", "Accuracy"));
        }
        out.push('\n');
        out.push_str(&format!("|{}|", "-".repeat(first + 2)));
        for (t, a) in &widths {
            out.push_str(&format!("{}|{}|", "-".repeat(t + 2), "-".repeat(a + 2)));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("| {:<first$} |", row.label));
            for (cell, (t, a)) in row.cells.iter().zip(&widths) {
                out.push_str(&format!(" {:>t$} | {:>a$} |", cell.time, cell.accuracy));
            }
            out.push('\n');
        }
        out
    }
}
