//! CSV tables and per-group aggregates.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::metrics::Quality;

/// Reals are written with 17 significant digits.
pub fn real(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Files written by a command, plus the runs that diverged along the way.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub files: Vec<PathBuf>,
    pub diverged: Vec<String>,
}

impl Report {
    pub fn write(&mut self, dir: &Path, name: &str, table: &CsvTable) -> Result<()> {
        let path = dir.join(name);
        table.write(&path)?;
        self.files.push(path);
        Ok(())
    }

    pub fn write_text(&mut self, dir: &Path, name: &str, text: &str) -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, text)?;
        self.files.push(path);
        Ok(())
    }
}

/// Sample mean and standard deviation (`n - 1` denominator; 0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub const QUALITY_COLUMNS: [&str; 3] = ["mse", "psnr", "ssim"];

pub fn quality_cells(q: &Quality) -> Vec<String> {
    vec![real(q.mse), real(q.psnr), real(q.ssim)]
}

/// One aggregate row per distinct key, in first-appearance order: the key columns, `n`,
/// then mean and std of each metric.
pub fn summarize(key_columns: &[&str], rows: &[(Vec<String>, Quality)]) -> CsvTable {
    let mut header: Vec<&str> = key_columns.to_vec();
    header.extend([
        "n",
        "mse_mean",
        "mse_std",
        "psnr_mean",
        "psnr_std",
        "ssim_mean",
        "ssim_std",
    ]);
    let mut table = CsvTable::new(&header);
    let mut order: Vec<&Vec<String>> = Vec::new();
    let mut groups: HashMap<&Vec<String>, Vec<&Quality>> = HashMap::new();
    for (k, q) in rows {
        groups
            .entry(k)
            .or_insert_with(|| {
                order.push(k);
                Vec::new()
            })
            .push(q);
    }
    for k in order {
        let qs = &groups[k];
        let mut row = k.clone();
        row.push(qs.len().to_string());
        for f in [|q: &Quality| q.mse, |q: &Quality| q.psnr, |q: &Quality| q.ssim] {
            let vals: Vec<f64> = qs.iter().map(|q| f(q)).collect();
            let (m, s) = mean_std(&vals);
            row.push(real(m));
            row.push(real(s));
        }
        table.push(row);
    }
    table
}
