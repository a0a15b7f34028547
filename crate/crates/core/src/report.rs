//! Result tables: recomputing published scores and summarizing evaluation runs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{cta, tarmse, MetricReport, MetricsError, ModelScore};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("results table: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}: {detail}")]
    BadRow { row: usize, detail: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// One column of a published results table: per-step scores plus the summary rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedScores {
    pub model: String,
    pub config: String,
    pub rmse: Vec<f64>,
    pub f1: Vec<f64>,
    pub tarmse: f64,
    pub f1_mean: f64,
    pub cta_percent: f64,
}

impl PublishedScores {
    pub fn name(&self) -> String {
        format!("{} {}", self.model, self.config)
    }
}

#[derive(Debug, Deserialize)]
struct RawRow {
    model: String,
    config: String,
    rmse: String,
    f1: String,
    tarmse: f64,
    f1_mean: f64,
    cta_percent: f64,
}

fn numbers(field: &str, row: usize) -> Result<Vec<f64>, ReportError> {
    field
        .split_whitespace()
        .map(|v| v.parse().map_err(|_| ReportError::BadRow { row, detail: format!("not a number: {v:?}") }))
        .collect()
}

/// Parses `model,config,rmse,f1,tarmse,f1_mean,cta_percent` with space-separated step lists.
pub fn parse_published(text: &str) -> Result<Vec<PublishedScores>, ReportError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in reader.deserialize::<RawRow>().enumerate() {
        let raw = rec?;
        let row = i + 2;
        let rmse = numbers(&raw.rmse, row)?;
        let f1 = numbers(&raw.f1, row)?;
        if rmse.is_empty() || rmse.len() != f1.len() {
            return Err(ReportError::BadRow { row, detail: "rmse and f1 need the same, non-zero length".into() });
        }
        out.push(PublishedScores {
            model: raw.model,
            config: raw.config,
            rmse,
            f1,
            tarmse: raw.tarmse,
            f1_mean: raw.f1_mean,
            cta_percent: raw.cta_percent,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub name: String,
    pub published_tarmse: f64,
    pub tarmse: f64,
    pub tarmse_ok: bool,
    pub published_cta_percent: f64,
    /// CTA from the recomputed TARMSE and the mean of the per-step F1 scores.
    pub cta_percent: f64,
    pub cta_ok: bool,
}

pub const TARMSE_TOLERANCE: f64 = 0.01;
/// Percentage points.
pub const CTA_TOLERANCE: f64 = 0.5;

/// Recomputes TARMSE and CTA for every published column.
pub fn replicate(rows: &[PublishedScores], k: f64, tau: f64) -> Result<Vec<Replication>, ReportError> {
    rows.iter()
        .map(|r| {
            let t = tarmse(&r.rmse, k)?;
            let f1 = r.f1.iter().sum::<f64>() / r.f1.len() as f64;
            let c = 100.0 * cta(t, f1, tau)?;
            Ok(Replication {
                name: r.name(),
                published_tarmse: r.tarmse,
                tarmse: t,
                tarmse_ok: (t - r.tarmse).abs() <= TARMSE_TOLERANCE + 1e-9,
                published_cta_percent: r.cta_percent,
                cta_percent: c,
                cta_ok: (c - r.cta_percent).abs() <= CTA_TOLERANCE + 1e-9,
            })
        })
        .collect()
}

pub fn replication_table(rows: &[Replication]) -> String {
    let mut out = String::from("model        TARMSE  (pub)   ok   CTA %   (pub)   ok\n");
    for r in rows {
        let mark = |ok: bool| if ok { "yes" } else { "NO" };
        let _ = writeln!(
            out,
            "{:<12} {:>6.3} {:>6.2}  {:<4} {:>6.2} {:>6.2}  {}",
            r.name,
            r.tarmse,
            r.published_tarmse,
            mark(r.tarmse_ok),
            r.cta_percent,
            r.published_cta_percent,
            mark(r.cta_ok)
        );
    }
    out
}

/// One evaluated model as stored by the evaluation stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatedModel {
    pub name: String,
    pub arch: String,
    pub config: String,
    pub metrics: MetricReport,
}

impl EvaluatedModel {
    pub fn score(&self) -> ModelScore {
        ModelScore { name: self.name.clone(), tarmse: self.metrics.tarmse, f1: self.metrics.f1_mean }
    }
}

/// Table with one column per model and one row per score.
pub fn summary_table(models: &[EvaluatedModel]) -> String {
    let steps = models.iter().map(|m| m.metrics.rmse.len()).max().unwrap_or(0);
    let width = models.iter().map(|m| m.name.len()).max().unwrap_or(0).max(8) + 2;
    let mut out = format!("{:<10}", "metric");
    for m in models {
        let _ = write!(out, "{:>width$}", m.name);
    }
    out.push('\n');
    let mut line = |label: String, cell: &dyn Fn(&EvaluatedModel) -> String| {
        let _ = write!(out, "{label:<10}");
        for m in models {
            let _ = write!(out, "{:>width$}", cell(m));
        }
        out.push('\n');
    };
    for i in 0..steps {
        line(format!("RMSE_{}", i + 1), &|m| match m.metrics.rmse.get(i) {
            Some(Some(v)) => format!("{v:.2}"),
            Some(None) => "masked".into(),
            None => "NA".into(),
        });
    }
    for i in 0..steps {
        line(format!("F1_{}", i + 1), &|m| m.metrics.f1.get(i).map_or("NA".into(), |v| format!("{v:.2}")));
    }
    line("TARMSE".into(), &|m| format!("{:.2}", m.metrics.tarmse));
    line("F1".into(), &|m| format!("{:.2}", m.metrics.f1_mean));
    line("CTA (%)".into(), &|m| format!("{:.2}", 100.0 * m.metrics.cta));
    out
}
