//! Binary framing for 2-D float grids: `SPEC1`, `u32 rows`, `u32 cols`,
//! then `rows * cols` little-endian `f32` values in row-major order.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const SPEC_MAGIC: &[u8; 5] = b"SPEC1";

pub fn write_grid<W: Write>(w: &mut W, rows: usize, cols: usize, values: &[f32]) -> Result<()> {
    if rows * cols != values.len() {
        return Err(Error::invalid(format!(
            "grid of {rows}x{cols} cannot hold {} values",
            values.len()
        )));
    }
    let rows32 = u32::try_from(rows).map_err(|_| Error::invalid("too many rows"))?;
    let cols32 = u32::try_from(cols).map_err(|_| Error::invalid("too many columns"))?;
    let mut buf = Vec::with_capacity(13 + 4 * values.len());
    buf.extend_from_slice(SPEC_MAGIC);
    buf.extend_from_slice(&rows32.to_le_bytes());
    buf.extend_from_slice(&cols32.to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Returns `(rows, cols, values)`.
pub fn read_grid<R: Read>(r: &mut R) -> Result<(usize, usize, Vec<f32>)> {
    let mut head = [0u8; 13];
    r.read_exact(&mut head)
        .map_err(|e| Error::format("SPEC1", format!("truncated header: {e}")))?;
    if &head[0..5] != SPEC_MAGIC {
        return Err(Error::format("SPEC1", "bad magic"));
    }
    let rows = u32::from_le_bytes(head[5..9].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(head[9..13].try_into().unwrap()) as usize;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::format("SPEC1", "dimensions overflow"))?;
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)
        .map_err(|e| Error::format("SPEC1", format!("truncated payload: {e}")))?;
    let values = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((rows, cols, values))
}
