use std::path::Path;

use crate::error::{Error, Result};
use crate::experiments::{ExperimentReport, ReportRow};

pub const CSV_HEADER: &str = "rho,relative_error_inf,cosine_similarity";

fn sorted_rows(report: &ExperimentReport) -> Vec<ReportRow> {
    let mut rows = report.rows.clone();
    rows.sort_by(|a, b| a.rho.total_cmp(&b.rho));
    rows
}

/// 17 significant digits, so every finite value parses back bit-exact.
fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV table sorted ascending by ρ (stable, duplicates kept).
pub fn render_csv(report: &ExperimentReport) -> Result<String> {
    if report.rows.is_empty() {
        return Err(Error::Config(format!("report '{}' has no rows", report.experiment)));
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(CSV_HEADER.split(',')).map_err(io)?;
    for r in sorted_rows(report) {
        w.write_record([fmt(r.rho), fmt(r.relative_error_inf), fmt(r.cosine_similarity)])
            .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

/// Inverse of [`render_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = rd.headers().map_err(|e| Error::Config(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(Error::Config(format!("unexpected CSV header: {header:?}")));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Config(format!("bad number '{s}': {e}")));
    rd.records()
        .map(|rec| {
            let rec = rec.map_err(|e| Error::Config(e.to_string()))?;
            if rec.len() != 3 {
                return Err(Error::Config(format!("expected 3 fields, got {}", rec.len())));
            }
            Ok(ReportRow {
                rho: num(&rec[0])?,
                relative_error_inf: num(&rec[1])?,
                cosine_similarity: num(&rec[2])?,
            })
        })
        .collect()
}

/// Pretty JSON with the CSV rows (same order) and the metadata map.
pub fn render_json(report: &ExperimentReport) -> Result<String> {
    let value = serde_json::json!({
        "experiment": report.experiment,
        "columns": CSV_HEADER.split(',').collect::<Vec<_>>(),
        "rows": sorted_rows(report),
        "metadata": report.metadata,
    });
    let mut s = serde_json::to_string_pretty(&value).map_err(|e| Error::Io(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn emit_report(report: &ExperimentReport, csv_path: Option<&Path>, json_path: Option<&Path>) -> Result<()> {
    let csv = render_csv(report)?;
    if let Some(p) = csv_path {
        std::fs::write(p, csv).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
    }
    if let Some(p) = json_path {
        std::fs::write(p, render_json(report)?).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}
