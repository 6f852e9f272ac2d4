//! CSV output and summary statistics.

use std::path::{Path, PathBuf};

use crate::error::{HarnessError, Result};

/// Shortest round-trip decimal form; infinities as `inf` / `-inf`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Mean and population standard deviation (two-pass).
///
/// Identical values (infinities included) give a deviation of exactly 0;
/// a mix of infinite and finite values gives `NaN`.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    if values.iter().all(|&v| v == values[0]) {
        return (values[0], 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if !mean.is_finite() {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// An in-memory CSV table written in one go.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn write(&self, path: &Path) -> Result<PathBuf> {
        let csv_err = |e: csv::Error| HarnessError::Csv {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(&self.header).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(r).map_err(csv_err)?;
        }
        w.flush().map_err(|e| HarnessError::io(path, e))?;
        Ok(path.to_path_buf())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let csv_err = |e: csv::Error| HarnessError::Csv {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(csv_err)?;
        let mut records = r.records();
        let header = match records.next() {
            Some(h) => h.map_err(csv_err)?.iter().map(String::from).collect(),
            None => Vec::new(),
        };
        let mut table = Table { header, rows: Vec::new() };
        for rec in records {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != table.header.len() {
                return Err(HarnessError::Csv {
                    path: path.to_path_buf(),
                    message: format!("row {} has {} fields, header has {}", table.rows.len() + 1, rec.len(), table.header.len()),
                });
            }
            table.rows.push(rec.iter().map(String::from).collect());
        }
        Ok(table)
    }
}
