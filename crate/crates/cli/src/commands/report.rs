//! Joins per-seed `metrics.csv` files into mean ± std tables, one per mode.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use ocreplay::continual::MetricsRecord;

use super::train::run_dir_config;
use crate::output::{parse_metrics_csv, write_text, SCHEMA_LINE};
use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub mode: String,
    pub task: usize,
    pub runs: usize,
    /// `(column, mean, std)`; accuracies in percent.
    pub columns: Vec<(String, f64, f64)>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(run_dirs: &[PathBuf]) -> Result<Vec<Summary>, CliError> {
    let names: Vec<&str> = MetricsRecord::CSV_HEADER.split(',').collect();
    // mode -> task -> runs -> row
    let mut grouped: BTreeMap<String, BTreeMap<usize, Vec<Vec<f64>>>> = BTreeMap::new();
    for dir in run_dirs {
        let cfg = run_dir_config(dir)?;
        let path = dir.join("metrics.csv");
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let rows = parse_metrics_csv(&text).with_context(|| path.display().to_string())?;
        let by_task = grouped.entry(cfg.mode.name().to_string()).or_default();
        for row in rows {
            by_task.entry(row[0] as usize).or_default().push(row);
        }
    }
    let mut out = Vec::new();
    for (mode, tasks) in grouped {
        for (task, rows) in tasks {
            let columns = (1..names.len())
                .map(|j| {
                    let scale = if names[j].starts_with("alpha") { 100.0 } else { 1.0 };
                    let vals: Vec<f64> = rows.iter().map(|r| r[j] * scale).collect();
                    let (m, s) = mean_std(&vals);
                    (names[j].to_string(), m, s)
                })
                .collect();
            out.push(Summary {
                mode: mode.clone(),
                task,
                runs: rows.len(),
                columns,
            });
        }
    }
    Ok(out)
}

pub fn summary_csv(rows: &[Summary]) -> String {
    let mut s = format!("{SCHEMA_LINE}\nmode,task,runs");
    if let Some(first) = rows.first() {
        for (name, _, _) in &first.columns {
            let _ = write!(s, ",{name}_mean,{name}_std");
        }
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{},{}", r.mode, r.task, r.runs);
        for (_, m, sd) in &r.columns {
            let _ = write!(s, ",{m:.6},{sd:.6}");
        }
        s.push('\n');
    }
    s
}

/// Table of the accuracy and reconstruction columns, rows grouped by mode.
pub fn format_table(rows: &[Summary]) -> String {
    let shown = [
        "alpha_base",
        "alpha_new",
        "alpha_all",
        "gamma_base",
        "gamma_new",
        "gamma_all",
    ];
    let mut s = format!("{:<8} {:>4} {:>4}", "mode", "task", "runs");
    for c in shown {
        let _ = write!(s, " {c:>17}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{:<8} {:>4} {:>4}", r.mode, r.task, r.runs);
        for c in shown {
            let (_, m, sd) = r.columns.iter().find(|(n, _, _)| n == c).expect("known column");
            let _ = write!(s, " {:>17}", format!("{m:.2} ± {sd:.2}"));
        }
        s.push('\n');
    }
    s
}

pub fn run(run_dirs: &[PathBuf], output: Option<&Path>) -> Result<Vec<Summary>, CliError> {
    if run_dirs.is_empty() {
        return Err(CliError::Usage(anyhow::anyhow!("no run directories given")));
    }
    let rows = summarize(run_dirs)?;
    if let Some(path) = output {
        write_text(path, &summary_csv(&rows))?;
    }
    Ok(rows)
}
