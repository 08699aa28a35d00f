//! CSV tables and raw field dumps.
//!
//! Binary dumps hold little-endian `f64` values: fields one after another
//! (component-major), each field in row-major cell order with the last axis
//! fastest.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// A CSV cell; floats use the shortest round-trip scientific form so output
/// is bitwise reproducible.
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

pub fn csv_string(header: &[&str], rows: &[Vec<Cell>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        for (k, cell) in row.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            match cell {
                Cell::Int(v) => write!(out, "{v}").expect("string write"),
                Cell::Float(v) => write!(out, "{v:e}").expect("string write"),
                Cell::Text(v) => out.push_str(v),
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<Cell>]) -> Result<()> {
    write_text(path, &csv_string(header, rows))
}

pub fn dump_bytes(fields: &[&[f64]]) -> Vec<u8> {
    fields.iter().flat_map(|f| f.iter()).flat_map(|v| v.to_le_bytes()).collect()
}

pub fn write_dump(path: &Path, fields: &[&[f64]]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, dump_bytes(fields)).map_err(|e| Error::io(path, e))
}

/// Reads a dump back into `count` fields of equal length.
pub fn read_dump(path: &Path, count: usize) -> Result<Vec<Vec<f64>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if count == 0 || bytes.len() % (8 * count) != 0 {
        return Err(Error::Shape(format!("{} bytes do not split into {count} fields", bytes.len())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let len = values.len() / count;
    Ok(values.chunks(len).map(<[f64]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_formatting() {
        let s = csv_string(&["a", "b", "c"], &[vec![3usize.into(), 0.1.into(), "x".into()]]);
        assert_eq!(s, "a,b,c\n3,1e-1,x\n");
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        write_dump(&path, &[&[1.0, -2.5], &[3.0, 4.0]]).unwrap();
        assert_eq!(std::fs::read(&path).unwrap()[..8], 1.0f64.to_le_bytes());
        assert_eq!(read_dump(&path, 2).unwrap(), vec![vec![1.0, -2.5], vec![3.0, 4.0]]);
    }
}
