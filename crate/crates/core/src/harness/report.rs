use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::{io_err, EvalReport, HarnessError, Result, TraceLine};
use crate::pipeline::Variant;

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> HarnessError + '_ {
    move |e| HarnessError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Serialize)]
struct MetricsRow<'a> {
    corruption: &'a str,
    budget: usize,
    variant: &'a str,
    samples: usize,
    detection_loss: f64,
    f1: f64,
    selected_a: f64,
    selected_b: f64,
    executed_a: f64,
    executed_b: f64,
    retention_a: f64,
    retention_b: f64,
    cost: f64,
    budget_pass_rate: f64,
    skip_subset_rate: f64,
    margin: Option<f64>,
}

/// One row per grid cell, in report order.
pub fn write_metrics_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in &report.rows {
        w.serialize(MetricsRow {
            corruption: &r.corruption,
            budget: r.budget,
            variant: r.variant.name(),
            samples: r.samples,
            detection_loss: r.detection_loss,
            f1: r.f1,
            selected_a: r.selected[0],
            selected_b: r.selected[1],
            executed_a: r.executed[0],
            executed_b: r.executed[1],
            retention_a: r.retention[0],
            retention_b: r.retention[1],
            cost: r.cost,
            budget_pass_rate: r.budget_pass as f64 / r.samples as f64,
            skip_subset_rate: r.skip_subset as f64 / r.samples as f64,
            margin: r.margin,
        })
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Serialize)]
struct UtilizationRow<'a> {
    corruption: &'a str,
    budget: usize,
    variant: &'a str,
    selected_a: f64,
    selected_b: f64,
    executed_a: f64,
    executed_b: f64,
}

/// Mean per-modality layer counts of the controller-driven variants, one
/// row per (corruption, budget, variant); plottable as stacked bars.
pub fn write_utilization_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in report.rows.iter().filter(|r| matches!(r.variant, Variant::SwanC | Variant::SwanSC)) {
        w.serialize(UtilizationRow {
            corruption: &r.corruption,
            budget: r.budget,
            variant: r.variant.name(),
            selected_a: r.selected[0],
            selected_b: r.selected[1],
            executed_a: r.executed[0],
            executed_b: r.executed[1],
        })
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// One JSON object per line.
pub fn write_traces(traces: &[TraceLine], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for t in traces {
        serde_json::to_writer(&mut w, t).map_err(|e| HarnessError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes `report.json`, `metrics.csv` and `utilization.csv` into `dir`.
pub fn write_outputs(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("report.json");
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(&path, text).map_err(io_err(&path))?;
    write_metrics_csv(report, &dir.join("metrics.csv"))?;
    write_utilization_csv(report, &dir.join("utilization.csv"))
}
