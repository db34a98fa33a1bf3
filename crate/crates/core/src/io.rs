//! On-disk formats.
//!
//! Binary matrix container: 8-byte magic `DASMAT01`, row count and column
//! count as little-endian `u64`, then `rows * cols` little-endian `f64` in
//! row-major order. CSV output always writes floats with 17 significant
//! digits so values round-trip exactly.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DASMAT01";

/// Row-major dense matrix as stored in the container.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl RawMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch { expected: rows * cols, found: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[impl AsRef<[f64]>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch { expected: cols, found: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

impl From<&DMatrix<f64>> for RawMatrix {
    fn from(m: &DMatrix<f64>) -> Self {
        let data = (0..m.nrows()).flat_map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect();
        Self { rows: m.nrows(), cols: m.ncols(), data }
    }
}

impl From<&RawMatrix> for DMatrix<f64> {
    fn from(m: &RawMatrix) -> Self {
        DMatrix::from_row_slice(m.rows, m.cols, &m.data)
    }
}

pub fn encode_matrix(m: &RawMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * m.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.rows as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols as u64).to_le_bytes());
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_matrix(bytes: &[u8]) -> Result<RawMatrix> {
    if bytes.len() < 24 || &bytes[..8] != MAGIC {
        return Err(Error::Format("missing DASMAT01 header".into()));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
    let body = &bytes[24..];
    if body.len() != expected {
        return Err(Error::Format(format!("expected {expected} payload bytes, found {}", body.len())));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(RawMatrix { rows, cols, data })
}

pub fn write_matrix(path: &Path, m: &RawMatrix) -> Result<()> {
    std::fs::write(path, encode_matrix(m))?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<RawMatrix> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_matrix(&bytes)
}

/// 17-significant-digit float formatting.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".to_string()
    } else if v > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

/// Small CSV writer: header row, then rows of pre-formatted cells.
pub struct CsvWriter {
    out: BufWriter<File>,
    columns: usize,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", header.join(","))?;
        Ok(Self { out, columns: header.len() })
    }

    pub fn row(&mut self, cells: &[String]) -> Result<()> {
        if cells.len() != self.columns {
            return Err(Error::DimensionMismatch { expected: self.columns, found: cells.len() });
        }
        writeln!(self.out, "{}", cells.join(","))?;
        Ok(())
    }

    pub fn float_row(&mut self, values: &[f64]) -> Result<()> {
        let cells: Vec<String> = values.iter().map(|v| fmt_f64(*v)).collect();
        self.row(&cells)
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Writes a matrix as CSV with `c0..c{n-1}` headers.
pub fn write_matrix_csv(path: &Path, m: &RawMatrix) -> Result<()> {
    let names: Vec<String> = (0..m.cols).map(|j| format!("c{j}")).collect();
    let header: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut w = CsvWriter::create(path, &header)?;
    for i in 0..m.rows {
        w.float_row(m.row(i))?;
    }
    w.finish()
}

/// Reads a numeric CSV written by this module (header skipped).
pub fn read_csv_values(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|c| c.trim().parse::<f64>().map_err(|e| Error::Format(format!("{c:?}: {e}"))))
                .collect()
        })
        .collect()
}
