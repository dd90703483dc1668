//! On-disk tensor format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "BATN"
//! 4       2     format version, u16, currently 1
//! 6       1     dtype tag, u8, 0 = f32
//! 7       1     rank, u8, always 2
//! 8       16    dims, rank x u64 (rows, cols)
//! 24      ...   payload, rows*cols f32 values, row-major
//! ```
//!
//! Values round to the nearest f32 on write and widen back to f64 on read,
//! so a matrix whose entries are already f32-representable survives a
//! write/read cycle bit-exactly. Short files, oversized dims, stray bytes
//! after the payload, and non-finite payload values each fail with their
//! own error variant.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::TokenMatrix;

pub const MAGIC: [u8; 4] = *b"BATN";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;

const HEADER_LEN: usize = 24;

/// Serializes a matrix into the writer.
pub fn write_tensor_to<W: Write>(mut w: W, m: &TokenMatrix) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&[DTYPE_F32, 2])?;
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    for v in m.as_slice() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Reads a matrix from the reader, consuming it to the end.
pub fn read_tensor_from<R: Read>(mut r: R) -> Result<TokenMatrix> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_tensor(&bytes)
}

/// Writes a matrix to a file.
pub fn write_tensor(path: &Path, m: &TokenMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_to(&mut w, m)?;
    w.flush()?;
    Ok(())
}

/// Reads a matrix from a file.
pub fn read_tensor(path: &Path) -> Result<TokenMatrix> {
    read_tensor_from(BufReader::new(File::open(path)?))
}

/// Parses a matrix from an in-memory serialization.
pub fn parse_tensor(bytes: &[u8]) -> Result<TokenMatrix> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            let mut got = [0u8; 4];
            got.copy_from_slice(&bytes[..4]);
            return Err(Error::BadMagic { got });
        }
        return Err(Error::TruncatedPayload {
            expected: HEADER_LEN as u64,
            got: bytes.len() as u64,
        });
    }
    if bytes[..4] != MAGIC {
        let mut got = [0u8; 4];
        got.copy_from_slice(&bytes[..4]);
        return Err(Error::BadMagic { got });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    if bytes[6] != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(bytes[6]));
    }
    if bytes[7] != 2 {
        return Err(Error::UnsupportedRank(bytes[7]));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    if rows == 0 {
        return Err(Error::ZeroDim("rows"));
    }
    if cols == 0 {
        return Err(Error::ZeroDim("cols"));
    }
    let count = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or(Error::DimOverflow { rows, cols })?;
    if usize::try_from(rows).is_err() || usize::try_from(cols).is_err() {
        return Err(Error::DimOverflow { rows, cols });
    }
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < count {
        return Err(Error::TruncatedPayload {
            expected: count as u64,
            got: payload.len() as u64,
        });
    }
    if payload.len() > count {
        return Err(Error::TrailingBytes((payload.len() - count) as u64));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    TokenMatrix::new(rows as usize, cols as usize, data)
}
