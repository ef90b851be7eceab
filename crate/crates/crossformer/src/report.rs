//! CSV and JSON renderings of an `EvalReport`.

use std::path::Path;

use crossformer_core::metrics::{EvalReport, MetricRow};

use crate::error::{CliError, Result};

pub const CSV_HEADER: [&str; 6] = ["action", "count", "mpjpe", "p_mpjpe", "pck150", "auc"];

/// One row per action in name order, then the `aggregate` row.
pub fn to_csv(report: &EvalReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::Format(e.to_string());
    w.write_record(CSV_HEADER).map_err(fail)?;
    let rows = report.per_action.iter().map(|(a, r)| (a.as_str(), r)).chain([("aggregate", &report.aggregate)]);
    for (action, row) in rows {
        w.write_record(csv_row(action, row)).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn csv_row(action: &str, row: &MetricRow) -> [String; 6] {
    let m = &row.metrics;
    [action.to_string(), row.count.to_string(), m.mpjpe.to_string(), m.p_mpjpe.to_string(), m.pck150.to_string(), m.auc.to_string()]
}

pub fn to_json(report: &EvalReport) -> Result<String> {
    serde_json::to_string_pretty(report).map_err(|e| CliError::Format(e.to_string()))
}

pub fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}
