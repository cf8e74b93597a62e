use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{AucMap, Scope};
use crate::error::{Error, Result};
use crate::task::Target;

/// Test metrics of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub model: String,
    pub seed: u64,
    pub scope: Scope,
    pub auc: AucMap,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    if values.iter().all(|&v| v == values[0]) {
        return Some(Summary {
            n,
            mean: values[0],
            std: 0.0,
        });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Some(Summary { n, mean, std })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub target: Target,
    pub summary: Summary,
    /// Mean minus the baseline's mean on the same target.
    pub gain: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub baseline: String,
    pub scope: Scope,
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    pub fn row(&self, model: &str, target: Target) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.model == model && r.target == target)
    }
}

/// Aggregates runs per (model, target). Models keep their first-seen order.
pub fn report(runs: &[RunResult], baseline: &str) -> Result<MetricsReport> {
    let Some(first) = runs.first() else {
        return Err(Error::Contract("report over zero runs".into()));
    };
    if let Some(r) = runs.iter().find(|r| r.scope != first.scope) {
        return Err(Error::Contract(format!(
            "mixed scopes {} and {} in one report",
            first.scope.name(),
            r.scope.name()
        )));
    }
    let mut models: Vec<&str> = Vec::new();
    for r in runs {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    let collect = |model: &str, t: Target| -> Vec<f64> {
        runs.iter()
            .filter(|r| r.model == model)
            .filter_map(|r| r.auc.get(&t).copied().flatten())
            .collect()
    };
    let mut rows = Vec::new();
    for &model in &models {
        let count = runs.iter().filter(|r| r.model == model).count();
        if count < 2 {
            return Err(Error::Contract(format!(
                "model `{model}` has {count} run; mean±std needs at least 2"
            )));
        }
        let mut targets: Vec<Target> =
            runs.iter().filter(|r| r.model == model).flat_map(|r| r.auc.keys().copied()).collect();
        targets.sort();
        targets.dedup();
        for t in targets {
            let Some(summary) = summarize(&collect(model, t)) else {
                continue;
            };
            let gain = summarize(&collect(baseline, t)).map(|b| summary.mean - b.mean);
            rows.push(ReportRow {
                model: model.to_string(),
                target: t,
                summary,
                gain,
            });
        }
    }
    Ok(MetricsReport {
        baseline: baseline.to_string(),
        scope: first.scope,
        rows,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_report_csv<W: Write>(report: &MetricsReport, mut w: W) -> Result<()> {
    writeln!(w, "model,target,scope,runs,mean,std,gain,baseline")?;
    for r in &report.rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.model,
            r.target,
            report.scope.name(),
            r.summary.n,
            r.summary.mean,
            r.summary.std,
            opt(r.gain),
            report.baseline
        )?;
    }
    Ok(())
}

pub fn write_report_table<W: Write>(report: &MetricsReport, mut w: W) -> Result<()> {
    let header = ["model", "target", "auc (mean±std)", "gain", "runs"];
    let body: Vec<[String; 5]> = report
        .rows
        .iter()
        .map(|r| {
            [
                r.model.clone(),
                r.target.to_string(),
                format!("{:.4}±{:.4}", r.summary.mean, r.summary.std),
                r.gain.map(|g| format!("{g:+.4}")).unwrap_or_else(|| "-".into()),
                r.summary.n.to_string(),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| -> String {
        cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    writeln!(w, "scope: {}  baseline: {}", report.scope.name(), report.baseline)?;
    writeln!(w, "{}", line(&header.map(String::from)))?;
    for row in &body {
        writeln!(w, "{}", line(row))?;
    }
    Ok(())
}

/// Two whitespace-separated columns, preceded by `#` comment lines.
pub fn write_gnuplot<W: Write>(mut w: W, comments: &[String], points: &[(f64, f64)]) -> Result<()> {
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    for (x, y) in points {
        writeln!(w, "{x} {y}")?;
    }
    Ok(())
}
