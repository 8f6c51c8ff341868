//! Plain CSV tables: header row, `\n` line ends, floats at 12 significant
//! digits.

use std::fs;
use std::path::Path;

use crate::error::{HarnessError, Result};

/// `%.12g`-style rendering.
pub fn format_float(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.11e}");
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if !(-4..12).contains(&exp) {
        let m = trim_fraction(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        trim_fraction(&format!("{:.*}", (11 - exp) as usize, x)).to_string()
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// A step-indexed table of float columns.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Columns printed as integers.
    pub integer_columns: Vec<usize>,
}

impl MetricsTable {
    /// The first column is an integer step index.
    pub fn with_step(columns: &[&str]) -> Self {
        let mut all = vec!["step".to_string()];
        all.extend(columns.iter().map(|c| c.to_string()));
        MetricsTable {
            columns: all,
            rows: Vec::new(),
            integer_columns: vec![0],
        }
    }

    pub fn plain(columns: &[&str]) -> Self {
        MetricsTable {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            integer_columns: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    if self.integer_columns.contains(&i) {
                        format!("{}", x as i64)
                    } else {
                        format_float(x)
                    }
                })
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| HarnessError::io(path, e))
    }
}
