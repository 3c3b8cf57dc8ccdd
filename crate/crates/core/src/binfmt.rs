//! Little-endian binary primitives shared by the on-disk formats.
//!
//! All formats follow the same conventions: fixed-width headers of u64 fields
//! (magic tag first), then row-major f64 matrices in a documented order.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn write_u64<W: Write>(w: &mut W, path: &Path, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn write_f64<W: Write>(w: &mut W, path: &Path, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn read_u64<R: Read>(r: &mut R, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_f64<R: Read>(r: &mut R, path: &Path) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(f64::from_le_bytes(buf))
}

/// Writes a matrix row-major.
pub fn write_matrix<W: Write>(w: &mut W, path: &Path, mat: &DMatrix<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(mat.len() * 8);
    for i in 0..mat.nrows() {
        for j in 0..mat.ncols() {
            buf.extend_from_slice(&mat[(i, j)].to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_matrix<R: Read>(
    r: &mut R,
    path: &Path,
    nrows: usize,
    ncols: usize,
) -> Result<DMatrix<f64>> {
    let mut buf = vec![0u8; nrows * ncols * 8];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    let mut mat = DMatrix::zeros(nrows, ncols);
    let mut k = 0;
    for i in 0..nrows {
        for j in 0..ncols {
            mat[(i, j)] = f64::from_le_bytes(buf[k..k + 8].try_into().unwrap());
            k += 8;
        }
    }
    Ok(mat)
}

pub fn write_vector<W: Write>(w: &mut W, path: &Path, v: &DVector<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(v.len() * 8);
    for x in v.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_vector<R: Read>(r: &mut R, path: &Path, len: usize) -> Result<DVector<f64>> {
    Ok(DVector::from_column_slice(
        read_matrix(r, path, len, 1)?.as_slice(),
    ))
}

/// Checks a magic tag (stored as the first u64 of a header).
pub fn expect_magic<R: Read>(r: &mut R, path: &Path, magic: u64, what: &str) -> Result<()> {
    let got = read_u64(r, path)?;
    if got != magic {
        return Err(Error::format(path, format!("bad magic for {what}")));
    }
    Ok(())
}

pub fn checked_usize(v: u64, path: &Path, what: &str) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::format(path, format!("{what} out of range")))
}

pub fn magic(tag: &[u8; 8]) -> u64 {
    u64::from_le_bytes(*tag)
}
