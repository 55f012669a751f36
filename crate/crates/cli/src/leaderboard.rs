//! Leaderboard assembly and rendering from saved benchmark reports.

use serde::{Deserialize, Serialize};
use smallbench_core::glue::Task;
use smallbench_core::{Error, Result};

use crate::bench::{average_score, MetricReport};

/// Score columns, in [`Task::all`] order.
pub const TASK_COLUMNS: [&str; 8] = [
    "CoLA", "SST-2", "MRPC", "STS-B", "QQP", "MNLI", "QNLI", "RTE",
];

/// Nearest value with two decimal places.
fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// One leaderboard row. Scores are stored already rounded to 2 decimals so
/// that rendering is pure formatting and a markdown round trip is lossless;
/// the average is the rounded mean of the rounded scores, hence exactly
/// recomputable from the row itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub model: String,
    pub params: u64,
    pub scores: Vec<f64>,
    pub average: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Markdown,
    Json,
}

impl Format {
    pub fn parse(s: &str) -> Result<Format> {
        match s {
            "markdown" => Ok(Format::Markdown),
            "json" => Ok(Format::Json),
            _ => Err(Error::Config(format!(
                "format must be markdown or json, got {s:?}"
            ))),
        }
    }
}

/// Builds sorted rows from complete reports: average descending, ties by
/// label ascending, so the ordering is a deterministic permutation of the
/// inputs.
pub fn leaderboard_rows(reports: &[MetricReport]) -> Result<Vec<LeaderboardRow>> {
    if reports.is_empty() {
        return Err(Error::Config("leaderboard needs at least one report".into()));
    }
    let mut rows = Vec::with_capacity(reports.len());
    for report in reports {
        if !report.complete {
            return Err(Error::Config(format!(
                "report {:?} is incomplete ({}); not rankable",
                report.label,
                report.failure.as_deref().unwrap_or("no failure recorded")
            )));
        }
        if report.tasks.len() != Task::all().len() {
            return Err(Error::Config(format!(
                "report {:?} has {} tasks, expected 8",
                report.label,
                report.tasks.len()
            )));
        }
        for (t, expect) in report.tasks.iter().zip(TASK_COLUMNS) {
            if t.task != expect {
                return Err(Error::Config(format!(
                    "report {:?}: task {:?} where {expect:?} belongs",
                    report.label, t.task
                )));
            }
        }
        let scores: Vec<f64> = report.tasks.iter().map(|t| round2(t.best)).collect();
        let average = round2(average_score(&scores)?);
        rows.push(LeaderboardRow {
            model: report.label.clone(),
            params: report.params,
            scores,
            average,
        });
    }
    rows.sort_by(|a, b| {
        b.average
            .partial_cmp(&a.average)
            .expect("finite averages")
            .then_with(|| a.model.cmp(&b.model))
    });
    Ok(rows)
}

/// Renders complete reports as a ranked table. Markdown is a pipe table
/// with two-decimal scores and exact integer parameter counts; JSON is the
/// row array itself, so either form regenerates the other exactly.
pub fn render_leaderboard(reports: &[MetricReport], format: Format) -> Result<String> {
    let rows = leaderboard_rows(reports)?;
    Ok(match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&rows).expect("row serialization");
            s.push('\n');
            s
        }
        Format::Markdown => render_markdown(&rows),
    })
}

fn render_markdown(rows: &[LeaderboardRow]) -> String {
    let mut out = String::from("| Model | Params |");
    for col in TASK_COLUMNS {
        out.push_str(&format!(" {col} |"));
    }
    out.push_str(" AVG |\n|:--|--:|");
    out.push_str(&"--:|".repeat(TASK_COLUMNS.len() + 1));
    out.push('\n');
    for row in rows {
        out.push_str(&format!("| {} | {} |", row.model, row.params));
        for s in &row.scores {
            out.push_str(&format!(" {s:.2} |"));
        }
        out.push_str(&format!(" {:.2} |\n", row.average));
    }
    out
}

/// Parses a table produced by [`render_markdown`] back into rows.
pub fn parse_markdown(text: &str) -> Result<Vec<LeaderboardRow>> {
    let bad = |line: usize, why: String| Error::Config(format!("leaderboard line {line}: {why}"));
    let cells = |raw: &str| -> Vec<String> {
        raw.trim()
            .trim_start_matches('|')
            .trim_end_matches('|')
            .split('|')
            .map(|c| c.trim().to_string())
            .collect()
    };
    let mut lines = text.lines().enumerate();
    let (n, header) = lines
        .next()
        .ok_or_else(|| bad(1, "empty table".into()))?;
    let mut expect = vec!["Model".to_string(), "Params".to_string()];
    expect.extend(TASK_COLUMNS.iter().map(|c| c.to_string()));
    expect.push("AVG".to_string());
    if cells(header) != expect {
        return Err(bad(n + 1, "unrecognized header".into()));
    }
    lines.next(); // alignment separator
    let mut rows = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let c = cells(line);
        if c.len() != expect.len() {
            return Err(bad(n + 1, format!("{} cells, expected {}", c.len(), expect.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| bad(n + 1, format!("bad number {s:?}")))
        };
        rows.push(LeaderboardRow {
            model: c[0].clone(),
            params: c[1]
                .parse()
                .map_err(|_| bad(n + 1, format!("bad param count {:?}", c[1])))?,
            scores: c[2..10].iter().map(|s| num(s)).collect::<Result<_>>()?,
            average: num(&c[10])?,
        });
    }
    Ok(rows)
}
