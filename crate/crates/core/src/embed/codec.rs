//! Binary matrix file: little-endian `u32` dim, `u32` row count, then
//! `rows * dim` little-endian `f32` values in row-major order.

use std::io::{self, Read, Write};

use crate::semantic::EmbeddingMatrix;

use super::EmbedError;

pub fn write_matrix_f32le<W: Write>(mut w: W, m: &EmbeddingMatrix) -> io::Result<()> {
    let dim = u32::try_from(m.dim()).map_err(|_| io::Error::other("dim exceeds u32"))?;
    let rows = u32::try_from(m.rows()).map_err(|_| io::Error::other("row count exceeds u32"))?;
    w.write_all(&dim.to_le_bytes())?;
    w.write_all(&rows.to_le_bytes())?;
    for v in m.values() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Reads one matrix. The result is not marked normalized; call
/// [`EmbeddingMatrix::normalize`] before scoring.
pub fn read_matrix_f32le<R: Read>(mut r: R) -> Result<EmbeddingMatrix, EmbedError> {
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let dim = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let rows = u32::from_le_bytes(word) as usize;
    let n = rows
        .checked_mul(dim)
        .ok_or_else(|| io::Error::other("matrix header overflows"))?;
    let mut values = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        r.read_exact(&mut word)?;
        values.push(f64::from(f32::from_le_bytes(word)));
    }
    Ok(EmbeddingMatrix::new(rows, dim, values)?)
}
