//! CSV and JSON artifacts.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::optimizer::Trace;

pub const TRACE_HEADER: [&str; 9] = ["run_id", "t", "l_hat", "q_hat", "l_pop", "excess", "dist_p", "grad_norm", "wall_ms"];
pub const SERIES_HEADER: [&str; 4] = ["x", "value", "stderr", "trials"];

/// One row of an `x,value,stderr,trials` table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesRow {
    pub x: f64,
    pub value: f64,
    pub stderr: Option<f64>,
    pub trials: usize,
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// Trace rows ordered by run id, then `t`.
pub fn write_traces(path: &Path, runs: &[(String, &Trace)]) -> Result<()> {
    let mut sorted: Vec<&(String, &Trace)> = runs.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(csv_err)?;
    w.write_record(TRACE_HEADER).map_err(csv_err)?;
    for (id, trace) in sorted {
        for r in &trace.records {
            w.write_record([
                id.clone(),
                r.t.to_string(),
                num(r.l_hat),
                num(r.q_hat),
                opt(r.l_pop),
                opt(r.excess),
                opt(r.dist_p),
                num(r.grad_norm),
                format!("{:.3}", r.wall_ms),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_series(path: &Path, rows: &[SeriesRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(csv_err)?;
    w.write_record(SERIES_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([num(r.x), num(r.value), opt(r.stderr), r.trials.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Generic table with a caller-chosen header.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Replaces the `wall_ms` column of a trace CSV with a fixed value so runs
/// can be compared byte for byte.
pub fn mask_wall_clock(csv_text: &str) -> String {
    let mut lines = csv_text.lines();
    let Some(header) = lines.next() else { return String::new() };
    let col = header.split(',').position(|h| h == "wall_ms");
    let mut out = String::from(header);
    out.push('\n');
    for line in lines {
        match col {
            Some(c) => {
                let fields: Vec<&str> = line.split(',').enumerate().map(|(i, f)| if i == c { "-" } else { f }).collect();
                out.push_str(&fields.join(","));
            }
            None => out.push_str(line),
        }
        out.push('\n');
    }
    out
}
