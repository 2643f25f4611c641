//! Row-major, header-less CSV for cost matrices and couplings.
//!
//! Values are written with 17 significant digits so that reading a file
//! back reproduces every `f64` exactly.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub fn format_matrix_csv(matrix: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in matrix.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn write_matrix_csv(path: &Path, matrix: &Array2<f64>) -> Result<()> {
    fs::write(path, format_matrix_csv(matrix)).map_err(|e| Error::io(path, e))
}

pub fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix_csv(&text).map_err(|msg| Error::data(path, msg))
}

pub fn parse_matrix_csv(text: &str) -> std::result::Result<Array2<f64>, String> {
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|cell| {
                cell.trim()
                    .parse::<f64>()
                    .map_err(|_| format!("line {}: cannot parse {:?} as a number", lineno + 1, cell.trim()))
            })
            .collect::<std::result::Result<_, _>>()?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(format!("line {}: expected {c} columns, found {}", lineno + 1, row.len()))
            }
            _ => {}
        }
        values.extend(row);
        rows += 1;
    }
    let cols = cols.ok_or_else(|| "matrix file is empty".to_string())?;
    Array2::from_shape_vec((rows, cols), values).map_err(|e| e.to_string())
}
