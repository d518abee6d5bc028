//! Plain CSV helpers shared by the exporters.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// `header` then one `t,value` row per entry, `t = k·dt`.
pub fn write_series_csv<W: Write>(mut out: W, header: &str, dt: f64, values: &[f64]) -> Result<()> {
    writeln!(out, "{header}")?;
    for (k, v) in values.iter().enumerate() {
        writeln!(out, "{},{}", k as f64 * dt, v)?;
    }
    Ok(())
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Reads a numeric CSV with a header row. Returns the header names and the
/// columns.
pub fn read_csv_columns<R: Read>(input: R) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = BufReader::new(input).lines();
    let header: Vec<String> = match lines.next() {
        Some(line) => line?.split(',').map(|s| s.trim().to_string()).collect(),
        None => return Err(Error::Config("empty CSV".into())),
    };
    let mut cols = vec![Vec::new(); header.len()];
    for (row, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(Error::Config(format!("row {} has {} fields, expected {}", row + 1, fields.len(), header.len())));
        }
        for (col, f) in cols.iter_mut().zip(fields) {
            col.push(f.trim().parse().map_err(|_| Error::Config(format!("bad number {f:?} in row {}", row + 1)))?);
        }
    }
    Ok((header, cols))
}

/// One named column of a numeric CSV.
pub fn read_csv_column<R: Read>(input: R, name: &str) -> Result<Vec<f64>> {
    let (header, mut cols) = read_csv_columns(input)?;
    let idx = header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Config(format!("column {name:?} not found")))?;
    Ok(cols.swap_remove(idx))
}
