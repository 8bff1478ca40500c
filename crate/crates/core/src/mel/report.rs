use std::io::Write;

use serde::{Deserialize, Serialize};

use super::GradientResult;
use crate::error::Result;

pub const REPORT_HEADER: &str = "engine,n_unrolls,shape,peak_bytes,wall_time_s,loss";

/// One row of the engine benchmark table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub engine: String,
    pub n_unrolls: usize,
    /// Image shape joined with `x`, e.g. `32x32`.
    pub shape: String,
    pub peak_bytes: usize,
    pub wall_time_s: f64,
    pub loss: f64,
}

impl BenchRow {
    pub fn from_result(result: &GradientResult, n_unrolls: usize) -> Self {
        BenchRow {
            engine: result.engine.to_string(),
            n_unrolls,
            shape: result
                .output
                .shape()
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join("x"),
            peak_bytes: result.peak_tape_bytes,
            wall_time_s: result.wall_time,
            loss: result.loss,
        }
    }
}

pub fn write_engine_report<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| crate::Error::io("<csv>", e))?;
    Ok(())
}

/// CSV text with a header and one row per result; `n_unrolls[i]` labels `results[i]`.
pub fn engine_report(results: &[GradientResult], n_unrolls: &[usize]) -> Result<String> {
    let rows: Vec<BenchRow> = results
        .iter()
        .zip(n_unrolls)
        .map(|(r, &n)| BenchRow::from_result(r, n))
        .collect();
    let mut buf = Vec::new();
    if rows.is_empty() {
        writeln!(buf, "{REPORT_HEADER}").map_err(|e| crate::Error::io("<csv>", e))?;
    } else {
        write_engine_report(&rows, &mut buf)?;
    }
    Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
}

pub fn parse_engine_report(text: &str) -> Result<Vec<BenchRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| Ok(row?)).collect()
}
