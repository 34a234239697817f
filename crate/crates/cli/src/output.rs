//! CSV writers. Every file starts with a `# schema=1` line.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use ocreplay::continual::{MetricsRecord, OpenSetReport, ReplayStats};

pub const SCHEMA_LINE: &str = "# schema=1";

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut s = format!("{SCHEMA_LINE}\n{}\n", MetricsRecord::CSV_HEADER);
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Class histogram entries are `;`-separated, indexed by global class.
pub fn replay_csv(stats: &[ReplayStats]) -> String {
    let mut s = format!("{SCHEMA_LINE}\ntask,requested,attempts,acceptance_rate,class_histogram\n");
    for r in stats {
        let hist: Vec<String> = r.class_histogram.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(
            s,
            "{},{},{},{:.17e},{}",
            r.task,
            r.requested,
            r.attempts,
            r.acceptance_rate,
            hist.join(";")
        );
    }
    s
}

/// Rows are true classes and columns predictions, both named by original
/// dataset label.
pub fn confusion_csv(confusion: &[Vec<usize>], class_map: &[usize]) -> String {
    let label = |g: usize| class_map.get(g).map_or(g.to_string(), |c| c.to_string());
    let mut s = format!("{SCHEMA_LINE}\ntrue");
    for j in 0..confusion.first().map_or(0, Vec::len) {
        let _ = write!(s, ",pred_{}", label(j));
    }
    s.push('\n');
    for (i, row) in confusion.iter().enumerate() {
        s.push_str(&label(i));
        for c in row {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
    }
    s
}

pub fn openset_csv(report: &OpenSetReport) -> String {
    let mut s = format!("{SCHEMA_LINE}\ncriterion,dataset,threshold,percent_flagged\n");
    for r in &report.rows {
        let _ = writeln!(
            s,
            "{},{},{:.17e},{:.17e}",
            r.criterion, r.dataset, r.threshold, r.percent_flagged
        );
    }
    s
}

/// One row per Ω, one column per dataset with the percentage flagged.
pub fn omega_curve_csv(report: &OpenSetReport) -> String {
    let mut s = format!("{SCHEMA_LINE}\nomega");
    for d in &report.datasets {
        let _ = write!(s, ",{d}");
    }
    s.push('\n');
    for p in &report.omega_curve {
        let _ = write!(s, "{:.17e}", p.omega);
        for v in &p.percent_flagged {
            let _ = write!(s, ",{v:.17e}");
        }
        s.push('\n');
    }
    s
}

/// Parses a `metrics.csv` written by [`metrics_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().context("metrics.csv has no header")?;
    anyhow::ensure!(
        header == MetricsRecord::CSV_HEADER,
        "unexpected metrics.csv header {header:?}"
    );
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.parse::<f64>().with_context(|| format!("bad value {v:?}")))
                .collect()
        })
        .collect()
}
