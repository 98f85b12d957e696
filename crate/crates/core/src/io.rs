//! Binary weight files.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic  b"VSP1"
//! rows   u64
//! cols   u64
//! data   rows * cols f32, row-major
//! ```
//!
//! Vectors are stored as a single row.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Vector};

pub const MATRIX_MAGIC: &[u8; 4] = b"VSP1";
const HEADER_LEN: usize = 4 + 8 + 8;

pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + m.as_slice().len() * 4);
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for x in m.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::data("weight file shorter than its header"));
    }
    if &bytes[..4] != MATRIX_MAGIC {
        return Err(Error::data("bad magic, expected VSP1"));
    }
    let rows = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let payload = &bytes[HEADER_LEN..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::data("matrix dimensions overflow"))?;
    if payload.len() != expected {
        return Err(Error::data(format!(
            "{rows}x{cols} matrix needs {expected} payload bytes, found {}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::new(rows, cols, data)
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_matrix(m)).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes)
}

pub fn write_vector(path: impl AsRef<Path>, v: &Vector) -> Result<()> {
    let m = Matrix::new(1, v.len(), v.as_slice().to_vec())?;
    write_matrix(path, &m)
}

pub fn read_vector(path: impl AsRef<Path>) -> Result<Vector> {
    let m = read_matrix(path)?;
    if m.rows() != 1 {
        return Err(Error::data(format!(
            "expected a single-row vector file, found {} rows",
            m.rows()
        )));
    }
    Vector::new(m.into_inner()).map_err(|e| Error::data(e.to_string()))
}
