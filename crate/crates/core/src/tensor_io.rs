//! Binary matrix files.
//!
//! Layout (little-endian):
//! - magic: b"SIDT"
//! - version: u32 (= 1)
//! - rows: u32
//! - cols: u32
//! - data: rows * cols f32, row-major

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SIDT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode(matrix: &Array2<f32>) -> Vec<u8> {
    let (rows, cols) = matrix.dim();
    let mut buf = Vec::with_capacity(HEADER_LEN + rows * cols * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in matrix.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Array2<f32>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(path, "bad magic, expected \"SIDT\""));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}"),
        ));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let payload = &bytes[HEADER_LEN..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(path, "shape overflows"))?;
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "payload is {} bytes, header {rows}x{cols} requires {expected}",
                payload.len()
            ),
        ));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked above"))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write_matrix(path: impl AsRef<Path>, matrix: &Array2<f32>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode(matrix))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Widen to f64 for computation.
pub fn to_f64(m: &Array2<f32>) -> Array2<f64> {
    m.mapv(f64::from)
}

/// Narrow to f32 for storage.
pub fn to_f32(m: &Array2<f64>) -> Array2<f32> {
    m.mapv(|v| v as f32)
}
