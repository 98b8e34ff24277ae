//! Comma-separated table reading and numeric row writing shared by every file
//! format in the crate.
//!
//! All formats are plain numeric tables with a header row; floats are written
//! with Rust's shortest round-trip representation so reading a file back gives
//! the exact same bits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) struct Table {
    pub source: String,
    pub header: Vec<String>,
    /// (1-based line number, fields)
    pub rows: Vec<(usize, Vec<String>)>,
}

impl Table {
    pub fn parse(source: &str, text: &str) -> Result<Table> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(text.as_bytes());
        let csv_err = |e: csv::Error| {
            let at = e.position().map_or(source.to_string(), |p| format!("{source}:{}", p.line()));
            Error::parse(at, e.to_string())
        };
        let header: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        if header.iter().all(String::is_empty) {
            return Err(Error::parse(source, "missing header row"));
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(csv_err)?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            rows.push((line, record.iter().map(str::to_string).collect()));
        }
        Ok(Table { source: source.to_string(), header, rows })
    }

    pub fn read(path: &Path) -> Result<Table> {
        let text = fs::read_to_string(path)?;
        Table::parse(&path.display().to_string(), &text)
    }

    pub fn expect_prefix(&self, prefix: &[&str]) -> Result<()> {
        let ok = self.header.len() >= prefix.len() && self.header.iter().zip(prefix).all(|(h, p)| h == p);
        if ok {
            Ok(())
        } else {
            Err(Error::parse(format!("{}:1", self.source), format!("header must start with `{}`", prefix.join(","))))
        }
    }

    pub fn field<T: std::str::FromStr>(&self, line: usize, fields: &[String], idx: usize) -> Result<T> {
        let raw = fields
            .get(idx)
            .ok_or_else(|| Error::parse(format!("{}:{line}", self.source), format!("missing column {idx}")))?;
        raw.parse().map_err(|_| {
            Error::parse(
                format!("{}:{line}", self.source),
                format!("cannot parse `{raw}` in column {}", self.header.get(idx).map_or("?", |s| s.as_str())),
            )
        })
    }

    pub fn floats(&self, line: usize, fields: &[String], from: usize) -> Result<Vec<f64>> {
        (from..fields.len()).map(|i| self.field(line, fields, i)).collect()
    }
}

pub(crate) fn push_floats(out: &mut String, values: &[f64]) {
    for v in values {
        let _ = write!(out, ",{v}");
    }
}

pub(crate) fn indexed_header(prefix: &str, fixed: &[&str], n: usize) -> String {
    let mut h = fixed.join(",");
    for i in 0..n {
        let _ = write!(h, ",{prefix}_{i}");
    }
    h.push('\n');
    h
}
