use std::fmt::Write as _;

use crate::barrier::trainer::{IterationReport, WallTimes};
use crate::rollout::fmt_f64;

/// Reports averaged for "final" statistics.
pub const FINAL_WINDOW: usize = 10;

/// `metrics.csv` header for the given constraint names.
pub fn metrics_header(names: &[String]) -> String {
    let mut cols = vec!["iter".to_string(), "mean_reward".to_string()];
    cols.extend(names.iter().map(|n| format!("j_c.{n}")));
    cols.extend(names.iter().map(|n| format!("d_i.{n}")));
    cols.extend(
        ["kl", "objective_before", "objective_after", "accepted", "backtracks"]
            .iter()
            .map(|s| s.to_string()),
    );
    cols.extend(names.iter().map(|n| format!("margin.{n}")));
    cols.push("value_loss".into());
    cols.push("cost_loss".into());
    cols.join(",")
}

/// One deterministic CSV row; wall times go to [`timing_row`] instead.
pub fn metrics_row(r: &IterationReport) -> String {
    let mut s = String::new();
    let _ = write!(s, "{},{}", r.iter, fmt_f64(r.mean_reward));
    for v in r.j_c.iter().chain(&r.d_i) {
        let _ = write!(s, ",{}", fmt_f64(*v));
    }
    let _ = write!(
        s,
        ",{},{},{},{},{}",
        fmt_f64(r.kl),
        fmt_f64(r.objective_before),
        fmt_f64(r.objective_after),
        u8::from(r.accepted),
        r.backtracks
    );
    for v in &r.barrier_margins {
        let _ = write!(s, ",{}", fmt_f64(*v));
    }
    let _ = write!(s, ",{},{}", fmt_f64(r.value_loss), fmt_f64(r.cost_loss));
    s
}

pub const TIMING_HEADER: &str = "iter,collect_ms,policy_step_ms,critic_ms";

pub fn timing_row(r: &IterationReport) -> String {
    let w = r.wall_times;
    format!(
        "{},{:.3},{:.3},{:.3}",
        r.iter,
        w.collect * 1e3,
        w.policy_step * 1e3,
        w.critic * 1e3
    )
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("metrics file is empty")]
    Empty,
    #[error("malformed header")]
    Header,
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
}

/// Parses `metrics.csv` back into constraint names and reports (wall times zeroed).
pub fn parse_metrics(text: &str) -> Result<(Vec<String>, Vec<IterationReport>), MetricsError> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or(MetricsError::Empty)?.split(',').collect();
    let names: Vec<String> = header
        .iter()
        .filter_map(|c| c.strip_prefix("j_c."))
        .map(str::to_string)
        .collect();
    let k = names.len();
    let width = 2 + 2 * k + 5 + k + 2;
    if header.len() != width || metrics_header(&names) != header.join(",") {
        return Err(MetricsError::Header);
    }
    let mut reports = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        let err = |message: String| MetricsError::Row { row, message };
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != width {
            return Err(err(format!("{} cells, expected {width}", cells.len())));
        }
        let f = |j: usize| -> Result<f64, MetricsError> {
            cells[j]
                .parse::<f64>()
                .map_err(|_| err(format!("column {j} is not a number: `{}`", cells[j])))
        };
        let int = |j: usize| -> Result<u64, MetricsError> {
            cells[j]
                .parse::<u64>()
                .map_err(|_| err(format!("column {j} is not an integer: `{}`", cells[j])))
        };
        let vec = |from: usize| -> Result<Vec<f64>, MetricsError> { (from..from + k).map(f).collect() };
        let base = 2 + 2 * k;
        reports.push(IterationReport {
            iter: int(0)?,
            mean_reward: f(1)?,
            j_c: vec(2)?,
            d_i: vec(2 + k)?,
            kl: f(base)?,
            objective_before: f(base + 1)?,
            objective_after: f(base + 2)?,
            accepted: match cells[base + 3] {
                "1" => true,
                "0" => false,
                other => return Err(err(format!("accepted flag `{other}`"))),
            },
            backtracks: int(base + 4)? as usize,
            barrier_margins: vec(base + 5)?,
            value_loss: f(base + 5 + k)?,
            cost_loss: f(base + 6 + k)?,
            wall_times: WallTimes::default(),
        });
    }
    Ok((names, reports))
}

/// Averages over the last [`FINAL_WINDOW`] reports.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalStats {
    pub mean_reward: f64,
    pub j_c: Vec<f64>,
    /// Fraction of accepted policy steps over the whole run.
    pub acceptance_rate: f64,
}

impl FinalStats {
    pub fn from_reports(reports: &[IterationReport]) -> Option<Self> {
        let last = reports.last()?;
        let window = &reports[reports.len().saturating_sub(FINAL_WINDOW)..];
        let n = window.len() as f64;
        let mut j_c = vec![0.0; last.j_c.len()];
        for r in window {
            for (acc, v) in j_c.iter_mut().zip(&r.j_c) {
                *acc += v / n;
            }
        }
        Some(Self {
            mean_reward: window.iter().map(|r| r.mean_reward).sum::<f64>() / n,
            j_c,
            acceptance_rate: reports.iter().filter(|r| r.accepted).count() as f64 / reports.len() as f64,
        })
    }
}

/// One row of the constraint-satisfaction table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub name: String,
    pub kind: String,
    pub limit: f64,
    /// Limit on the `j_c` scale.
    pub scaled_limit: f64,
    pub final_j_c: f64,
}

impl SummaryRow {
    pub fn satisfied(&self) -> bool {
        self.final_j_c <= self.scaled_limit
    }
}

pub fn render_summary(rows: &[SummaryRow], stats: &FinalStats, iterations: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "iterations: {iterations}");
    let _ = writeln!(s, "final mean reward (last {FINAL_WINDOW}): {:.6}", stats.mean_reward);
    let _ = writeln!(s, "step acceptance rate: {:.4}", stats.acceptance_rate);
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<22} {:<14} {:>10} {:>14} {:>14} {:>9} {:>10}",
        "constraint", "kind", "limit", "scaled_limit", "final_j_c", "ratio", "satisfied"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<22} {:<14} {:>10.4} {:>14.6} {:>14.6} {:>9.4} {:>10}",
            r.name,
            r.kind,
            r.limit,
            r.scaled_limit,
            r.final_j_c,
            r.final_j_c / r.scaled_limit,
            if r.satisfied() { "yes" } else { "no" }
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(iter: u64) -> IterationReport {
        IterationReport {
            iter,
            mean_reward: -1.0 / 3.0,
            j_c: vec![0.1, 2.0],
            d_i: vec![2.5, 2.0 + 1e-4],
            kl: 0.004,
            objective_before: 0.1,
            objective_after: 0.2,
            accepted: iter % 2 == 0,
            backtracks: 3,
            barrier_margins: vec![2.4, 1e-4],
            value_loss: 0.5,
            cost_loss: 0.25,
            wall_times: WallTimes::default(),
        }
    }

    #[test]
    fn rows_reparse_exactly() {
        let names = vec!["a".to_string(), "b".to_string()];
        let mut text = metrics_header(&names);
        let reports: Vec<_> = (0..3).map(report).collect();
        for r in &reports {
            text.push('\n');
            text.push_str(&metrics_row(r));
        }
        let (back_names, back) = parse_metrics(&text).unwrap();
        assert_eq!(back_names, names);
        assert_eq!(back, reports);
    }

    #[test]
    fn header_only_parses_to_nothing() {
        let (names, reports) = parse_metrics(&metrics_header(&[])).unwrap();
        assert!(names.is_empty() && reports.is_empty());
    }

    #[test]
    fn final_stats_window() {
        let mut reports: Vec<_> = (0..20).map(report).collect();
        for (i, r) in reports.iter_mut().enumerate() {
            r.mean_reward = i as f64;
        }
        let s = FinalStats::from_reports(&reports).unwrap();
        assert_eq!(s.mean_reward, 14.5);
        assert_eq!(s.acceptance_rate, 0.5);
    }
}
