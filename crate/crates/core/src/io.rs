//! Reading and writing samples.
//!
//! A data file is either one number per line (blank lines and lines starting
//! with `#` are skipped) or a CSV file with a header row, from which one
//! column is taken by name or zero-based index.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::basis::check_support;
use crate::error::{invalid, Error, Result};

/// Parses newline-delimited numbers.
pub fn parse_lines<R: Read>(reader: R) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let v: f64 = t
            .parse()
            .map_err(|_| invalid(format!("line {}: '{t}' is not a number", i + 1)))?;
        out.push(v);
    }
    Ok(out)
}

/// Takes one column from CSV with a header row. `column` is a header name
/// or a zero-based index.
pub fn parse_csv_column<R: Read>(reader: R, column: &str) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let idx = match headers.iter().position(|h| h == column) {
        Some(i) => i,
        None => column
            .parse::<usize>()
            .ok()
            .filter(|&i| i < headers.len())
            .ok_or_else(|| invalid(format!("no column '{column}' in CSV header")))?,
    };
    let mut out = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let field = record
            .get(idx)
            .ok_or_else(|| invalid(format!("row {} has no column {idx}", row + 2)))?;
        let v: f64 = field
            .parse()
            .map_err(|_| invalid(format!("row {}: '{field}' is not a number", row + 2)))?;
        out.push(v);
    }
    Ok(out)
}

/// Checks that a sample is nonempty and inside `[0, 1]`.
pub fn validate_sample(data: &[f64]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::NoData);
    }
    data.iter().try_for_each(|&x| check_support(x))
}

/// Reads a sample from disk and validates it.
pub fn read_data(path: &Path, column: Option<&str>) -> Result<Vec<f64>> {
    let file = File::open(path)?;
    let data = match column {
        Some(c) => parse_csv_column(file, c)?,
        None => parse_lines(file)?,
    };
    validate_sample(&data)?;
    Ok(data)
}

/// Writes one value per line with round-trip precision.
pub fn write_lines<W: Write>(mut out: W, data: &[f64]) -> Result<()> {
    for v in data {
        writeln!(out, "{v}")?;
    }
    out.flush()?;
    Ok(())
}
