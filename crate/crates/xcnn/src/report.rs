//! Sweep results on disk: a machine-readable `results.csv`, per-run history
//! files, and a human-readable `report.md` shaped like the accuracy tables
//! the sweep reproduces — models as rows, subset percentages as columns,
//! better half of each baseline/cross pair in bold.

use std::fs;
use std::path::Path;

use xcnn_core::optim::TrainHistory;

use crate::error::{Error, Result};
use crate::stats;

#[derive(Debug, Clone)]
pub struct RunResult {
    pub model: String,
    pub p: usize,
    pub seed: u64,
    /// Top-1 test accuracy as a fraction.
    pub final_accuracy: f64,
    pub history: TrainHistory,
    pub params: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunFailure {
    pub model: String,
    pub p: usize,
    pub seed: u64,
    pub message: String,
}

pub fn write_results_csv(
    path: &Path,
    results: &[RunResult],
    failures: &[RunFailure],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(e.to_string()))?;
    let io = |e: csv::Error| Error::invalid(e.to_string());
    w.write_record(["model", "p", "seed", "final_accuracy", "params", "wall_seconds", "status"])
        .map_err(io)?;
    for r in results {
        w.write_record([
            r.model.as_str(),
            &r.p.to_string(),
            &r.seed.to_string(),
            &format!("{:.6}", r.final_accuracy),
            &r.params.to_string(),
            &format!("{:.2}", r.wall_seconds),
            "ok",
        ])
        .map_err(io)?;
    }
    for f in failures {
        w.write_record([
            f.model.as_str(),
            &f.p.to_string(),
            &f.seed.to_string(),
            "",
            "",
            "",
            &format!("failed: {}", f.message),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// One row per epoch: `epoch,train_loss,test_accuracy` (accuracy blank when
/// no test set was attached).
pub fn write_history_csv(path: &Path, history: &TrainHistory) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(e.to_string()))?;
    let io = |e: csv::Error| Error::invalid(e.to_string());
    w.write_record(["epoch", "train_loss", "test_accuracy"]).map_err(io)?;
    for e in &history.epochs {
        let acc = e.test_accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
        w.write_record([e.epoch.to_string(), format!("{:.6}", e.train_loss), acc]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Accuracies (fractions) of every finished run for `(model, p)`, in seed
/// order.
fn samples(results: &[RunResult], model: &str, p: usize) -> Vec<f64> {
    let mut runs: Vec<(u64, f64)> = results
        .iter()
        .filter(|r| r.model == model && r.p == p)
        .map(|r| (r.seed, r.final_accuracy))
        .collect();
    runs.sort_by_key(|&(seed, _)| seed);
    runs.into_iter().map(|(_, a)| a).collect()
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Two-decimal percentage, the table convention.
fn cell(acc: f64, bold: bool) -> String {
    if bold {
        format!("**{:.2}**", acc * 100.0)
    } else {
        format!("{:.2}", acc * 100.0)
    }
}

/// Render the accuracy table, one pair of rows per `(baseline, cross)` pair,
/// plus a significance section when any cell has two or more seeds.
pub fn render_report(
    pairs: &[(String, String)],
    points: &[usize],
    results: &[RunResult],
    failures: &[RunFailure],
) -> String {
    let mut out = String::from("# Subset sweep\n\nMean top-1 test accuracy (%) over seeds; ");
    out.push_str("the better of each baseline/cross pair is bold, ties bold both, ");
    out.push_str("`—` marks points not scheduled or not finished.\n\n");

    out.push_str("| Model |");
    for p in points {
        out.push_str(&format!(" {p}% |"));
    }
    out.push('\n');
    out.push_str("| --- |");
    out.push_str(&" --- |".repeat(points.len()));
    out.push('\n');

    for (base, cross) in pairs {
        for model in [base, cross] {
            let other = if model == base { cross } else { base };
            out.push_str(&format!("| {model} |"));
            for &p in points {
                let own = mean(&samples(results, model, p));
                let theirs = mean(&samples(results, other, p));
                let text = match own {
                    None => "—".to_string(),
                    Some(m) => {
                        let bold = theirs.is_none_or(|t| m >= t);
                        cell(m, bold)
                    }
                };
                out.push_str(&format!(" {text} |"));
            }
            out.push('\n');
        }
    }

    let mut tests = String::new();
    for (base, cross) in pairs {
        for &p in points {
            let a = samples(results, base, p);
            let b = samples(results, cross, p);
            if a.len() < 2 || b.len() < 2 {
                continue;
            }
            if let Ok(t) = stats::t_test(&a, &b) {
                tests.push_str(&format!(
                    "| {base} vs {cross} | {p}% | {:+.3} | {:.4} | {} |\n",
                    t.t,
                    t.p_value,
                    if t.significant { "yes" } else { "no" }
                ));
            }
        }
    }
    if !tests.is_empty() {
        out.push_str("\n## Welch t-tests\n\n");
        out.push_str("| Pair | subset | t | p-value | significant at 0.05 |\n");
        out.push_str("| --- | --- | --- | --- | --- |\n");
        out.push_str(&tests);
    }

    if !failures.is_empty() {
        out.push_str("\n## Failed runs\n\n");
        for f in failures {
            out.push_str(&format!("- {} p={} seed={}: {}\n", f.model, f.p, f.seed, f.message));
        }
    }
    out
}

pub fn write_report(
    path: &Path,
    pairs: &[(String, String)],
    points: &[usize],
    results: &[RunResult],
    failures: &[RunFailure],
) -> Result<()> {
    fs::write(path, render_report(pairs, points, results, failures))
        .map_err(|e| Error::io(path, e))
}
