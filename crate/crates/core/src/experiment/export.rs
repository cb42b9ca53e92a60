//! CSV export of metrics logs.

use std::io::Write;
use std::path::Path as FsPath;

use super::metrics::{read_jsonl, MetricsRecord};
use crate::error::{RavrError, Result};

/// Writes the selected columns of a JSONL log as CSV; returns the number of
/// data rows.
pub fn export_csv<W: Write>(jsonl: &FsPath, columns: &[String], out: W) -> Result<usize> {
    if columns.is_empty() {
        return Err(RavrError::Validation("no columns selected".into()));
    }
    if let Some(bad) = columns.iter().find(|c| !MetricsRecord::COLUMNS.contains(&c.as_str())) {
        return Err(RavrError::UnknownColumn(bad.clone()));
    }
    let records = read_jsonl(jsonl)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(columns)?;
    for r in &records {
        let row = columns.iter().map(|c| r.cell(c)).collect::<Result<Vec<_>>>()?;
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| RavrError::io(jsonl, e))?;
    Ok(records.len())
}

/// As [`export_csv`], into a file.
pub fn export_csv_file(jsonl: &FsPath, columns: &[String], out: &FsPath) -> Result<usize> {
    let file = std::fs::File::create(out).map_err(|e| RavrError::io(out, e))?;
    export_csv(jsonl, columns, std::io::BufWriter::new(file))
}
