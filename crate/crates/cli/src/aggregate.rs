//! Per-algorithm aggregates over run summaries. Everything here is a pure
//! function of [`SummaryRow`]s, so a bench aggregate can always be rebuilt
//! from its `summary.csv`.

use std::fmt::Write as _;
use std::path::Path;

use rotavg::io::{SummaryRow, NOT_CONVERGED};
use rotavg::metrics::median;
use rotavg::Algorithm;

use crate::error::CliError;

/// Step milestones for a 300K-step budget. Runs with another budget use the
/// same fractions of their own `max_iters`.
pub const MILESTONES: [u64; 5] = [30_000, 70_000, 100_000, 150_000, 300_000];
pub const MILESTONE_BUDGET: u64 = 300_000;

pub fn scaled_milestone(milestone: u64, max_iters: u64) -> u64 {
    (u128::from(milestone) * u128::from(max_iters) / u128::from(MILESTONE_BUDGET)) as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub algorithm: Algorithm,
    pub runs: usize,
    pub converged: usize,
    /// Mean steps-to-5° over the runs that converged.
    pub mean_steps: Option<f64>,
    pub min_steps: Option<u64>,
    /// `None` when any run failed to converge.
    pub max_steps: Option<u64>,
    pub mean_nauc: f64,
    pub min_nauc: f64,
    pub max_nauc: f64,
    /// Percent of runs converged by each of [`MILESTONES`].
    pub pct_converged: [f64; 5],
    /// Mean and median over runs of the final mean pairwise error (mean edge
    /// error for environments without ground truth).
    pub final_mean_deg: f64,
    pub final_median_deg: f64,
    pub final_rel_mean_deg: f64,
    pub final_abs_mean_deg: Option<f64>,
}

fn final_curve(row: &SummaryRow) -> f64 {
    row.final_ape_mean_deg.unwrap_or(row.final_rel_mean_deg)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn aggregate_one(algorithm: Algorithm, rows: &[&SummaryRow]) -> AggregateRow {
    let steps: Vec<u64> = rows.iter().filter_map(|r| r.steps_to_5deg).collect();
    let naucs: Vec<f64> = rows.iter().map(|r| r.nauc).collect();
    let mut finals: Vec<f64> = rows.iter().map(|r| final_curve(r)).collect();
    let mut pct_converged = [0.0; 5];
    for (slot, &m) in pct_converged.iter_mut().zip(&MILESTONES) {
        let hit = rows
            .iter()
            .filter(|r| {
                r.steps_to_5deg
                    .is_some_and(|s| s <= scaled_milestone(m, r.max_iters))
            })
            .count();
        *slot = 100.0 * hit as f64 / rows.len() as f64;
    }
    let abs: Vec<f64> = rows.iter().filter_map(|r| r.final_abs_mean_deg).collect();
    AggregateRow {
        algorithm,
        runs: rows.len(),
        converged: steps.len(),
        mean_steps: (!steps.is_empty())
            .then(|| steps.iter().map(|&s| s as f64).sum::<f64>() / steps.len() as f64),
        min_steps: steps.iter().copied().min(),
        max_steps: if steps.len() == rows.len() {
            steps.iter().copied().max()
        } else {
            None
        },
        mean_nauc: mean(&naucs),
        min_nauc: naucs.iter().copied().fold(f64::INFINITY, f64::min),
        max_nauc: naucs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        pct_converged,
        final_mean_deg: mean(&finals),
        final_median_deg: median(&mut finals),
        final_rel_mean_deg: mean(
            &rows
                .iter()
                .map(|r| r.final_rel_mean_deg)
                .collect::<Vec<_>>(),
        ),
        final_abs_mean_deg: (abs.len() == rows.len()).then(|| mean(&abs)),
    }
}

/// One row per algorithm present in `rows`, in [`Algorithm::ALL`] order.
pub fn aggregate(rows: &[SummaryRow]) -> Vec<AggregateRow> {
    Algorithm::ALL
        .iter()
        .filter_map(|&alg| {
            let group: Vec<&SummaryRow> = rows.iter().filter(|r| r.algorithm == alg).collect();
            (!group.is_empty()).then(|| aggregate_one(alg, &group))
        })
        .collect()
}

pub const AGGREGATE_HEADER: [&str; 18] = [
    "algorithm",
    "runs",
    "converged",
    "mean_steps_to_5deg",
    "min_steps_to_5deg",
    "max_steps_to_5deg",
    "mean_nauc",
    "min_nauc",
    "max_nauc",
    "pct_converged_30k",
    "pct_converged_70k",
    "pct_converged_100k",
    "pct_converged_150k",
    "pct_converged_300k",
    "final_mean_deg",
    "final_median_deg",
    "final_rel_mean_deg",
    "final_abs_mean_deg",
];

fn steps_cell(s: Option<u64>) -> String {
    s.map_or_else(|| NOT_CONVERGED.to_string(), |v| v.to_string())
}

pub fn write_aggregate_csv(rows: &[AggregateRow], path: &Path) -> Result<(), CliError> {
    let mut out = String::new();
    let _ = writeln!(out, "{}", AGGREGATE_HEADER.join(","));
    for r in rows {
        let mut cells = vec![
            r.algorithm.to_string(),
            r.runs.to_string(),
            r.converged.to_string(),
            r.mean_steps
                .map_or_else(|| NOT_CONVERGED.to_string(), |v| v.to_string()),
            steps_cell(r.min_steps),
            steps_cell(r.max_steps),
            r.mean_nauc.to_string(),
            r.min_nauc.to_string(),
            r.max_nauc.to_string(),
        ];
        cells.extend(r.pct_converged.iter().map(|p| p.to_string()));
        cells.extend([
            r.final_mean_deg.to_string(),
            r.final_median_deg.to_string(),
            r.final_rel_mean_deg.to_string(),
            r.final_abs_mean_deg
                .map(|v| v.to_string())
                .unwrap_or_default(),
        ]);
        let _ = writeln!(out, "{}", cells.join(","));
    }
    write_text(path, &out)
}

/// Fixed-width table for terminals and `aggregate.txt`.
pub fn render_table(rows: &[AggregateRow]) -> String {
    let steps_k =
        |s: Option<f64>| s.map_or_else(|| "NotConv".to_string(), |v| format!("{:.1}K", v / 1000.0));
    let int_k = |s: Option<u64>| steps_k(s.map(|v| v as f64));
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<6} {:>5} {:>9} {:>9} {:>9} {:>9} {:>8} {:>8} {:>8}  {:>5} {:>5} {:>5} {:>5} {:>5}  {:>10} {:>10}",
        "algo", "runs", "conv", "mean", "min", "max", "nAUC", "minAUC", "maxAUC",
        "30K%", "70K%", "100K%", "150K%", "300K%", "final_mean", "final_med"
    );
    for r in rows {
        let _ = write!(
            out,
            "{:<6} {:>5} {:>9} {:>9} {:>9} {:>9} {:>8.2} {:>8.2} {:>8.2} ",
            r.algorithm.name(),
            r.runs,
            format!("{}/{}", r.converged, r.runs),
            steps_k(r.mean_steps),
            int_k(r.min_steps),
            int_k(r.max_steps),
            r.mean_nauc,
            r.min_nauc,
            r.max_nauc,
        );
        for p in r.pct_converged {
            let _ = write!(out, " {p:>5.0}");
        }
        let _ = writeln!(
            out,
            "  {:>10.4} {:>10.4}",
            r.final_mean_deg, r.final_median_deg
        );
    }
    let _ = writeln!(
        out,
        "steps to mean pairwise error < 5 deg; milestone columns are fractions of each run's budget (30K..300K of 300K)"
    );
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::file(format!("cannot write {}", path.display()), e))
}
