//! Evaluation report JSON and its text summary.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rrrn_core::protocol::{aggregate_folds, EvalReport};

use crate::error::{Error, Result};

pub fn to_json(report: &EvalReport) -> Result<String> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    Ok(text)
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::write(path, to_json(report)?).map_err(Error::io(path))
}

/// Reads a report and checks that its aggregate matches the fold matrices.
pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let report: EvalReport = serde_json::from_str(&text)?;
    let recomputed = aggregate_folds(report.task, &report.folds)?;
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 || (a.is_nan() && b.is_nan());
    let a = &report.aggregate;
    if !(close(a.war, recomputed.war) && close(a.uar, recomputed.uar) && close(a.f1, recomputed.f1) && close(a.wf1, recomputed.wf1))
        || a.rule != recomputed.rule
    {
        return Err(Error::format(path, "aggregate does not match the per-fold confusion matrices"));
    }
    Ok(report)
}

pub fn summary(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "task {}  occlusion {}  config {}",
        report.task.as_str(),
        report.occlusion,
        report.config_fingerprint
    );
    let _ = writeln!(out, "{:<28} {:>6} {:>7} {:>7} {:>7} {:>7}", "fold", "n", "WAR", "UAR", "F1", "WF1");
    for f in &report.folds {
        let n: u64 = f.confusion.iter().flatten().sum();
        let _ = writeln!(out, "{:<28} {:>6} {:>7.4} {:>7.4} {:>7.4} {:>7.4}", f.name, n, f.war, f.uar, f.f1, f.wf1);
    }
    let a = &report.aggregate;
    let _ = writeln!(
        out,
        "{:<28} {:>6} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
        format!("aggregate ({})", a.rule),
        "",
        a.war,
        a.uar,
        a.f1,
        a.wf1
    );
    out
}
