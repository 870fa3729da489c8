//! Writing reports to disk.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::error::{CliError, Result};
use crate::experiment::{AggregateReport, SweepReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(CliError::usage(format!("unknown report format `{other}` (json, csv)"))),
        }
    }
}

/// Parses a comma separated list such as `json,csv`.
pub fn parse_formats(list: &str) -> Result<Vec<ReportFormat>> {
    let mut out = Vec::new();
    for f in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let f: ReportFormat = f.parse()?;
        if !out.contains(&f) {
            out.push(f);
        }
    }
    if out.is_empty() {
        return Err(CliError::usage("no report format given"));
    }
    Ok(out)
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

pub const CSV_HEADER: [&str; 6] = ["axis", "method", "metric", "mean", "stderr", "reps"];

fn csv_rows(w: &mut csv::Writer<Vec<u8>>, axis: &str, report: &AggregateReport) -> csv::Result<()> {
    for (m, agg) in &report.methods {
        for (metric, stat) in [("precision", agg.precision), ("recall", agg.recall), ("f1", agg.f1)] {
            let stderr = stat.stderr.map_or_else(String::new, |v| v.to_string());
            w.write_record([axis, m.as_str(), metric, &stat.mean.to_string(), &stderr, &agg.reps.to_string()])?;
        }
    }
    Ok(())
}

fn finish(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
}

/// `axis,method,metric,mean,stderr,reps` rows of one experiment; `axis` is empty.
pub fn report_csv(report: &AggregateReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory writer");
    csv_rows(&mut w, "", report).expect("in-memory writer");
    finish(w)
}

/// The same rows for every point of a sweep, keyed by the axis value.
pub fn sweep_csv(sweep: &SweepReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory writer");
    for (v, r) in sweep.values.iter().zip(&sweep.reports) {
        csv_rows(&mut w, &v.to_string(), r).expect("in-memory writer");
    }
    finish(w)
}

fn write(dir: &Path, name: &str, body: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let path = dir.join(name);
    std::fs::write(&path, body).map_err(CliError::io(&path))?;
    Ok(path)
}

pub fn emit_report(report: &AggregateReport, formats: &[ReportFormat], dir: &Path) -> Result<Vec<PathBuf>> {
    formats
        .iter()
        .map(|f| match f {
            ReportFormat::Json => write(dir, "report.json", &to_json(report)),
            ReportFormat::Csv => write(dir, "report.csv", &report_csv(report)),
        })
        .collect()
}

pub fn emit_sweep(sweep: &SweepReport, formats: &[ReportFormat], dir: &Path) -> Result<Vec<PathBuf>> {
    formats
        .iter()
        .map(|f| match f {
            ReportFormat::Json => write(dir, "sweep.json", &to_json(sweep)),
            ReportFormat::Csv => write(dir, "sweep.csv", &sweep_csv(sweep)),
        })
        .collect()
}
