//! Checkpoint layout: `CKPT1`, `u32` config-JSON length, the JSON, `u32`
//! tensor count, then per tensor `u32` name length, UTF-8 name, `u32` ndim,
//! `ndim x u32` dims and a `SPEC1` grid of `dims[0]` rows.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::framing::{read_grid, write_grid};

use super::model::{Model, ModelConfig};
use super::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 5] = b"CKPT1";

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid("value exceeds u32"))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::format("CKPT1", format!("truncated: {e}")))?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn write_checkpoint<W: Write>(w: &mut W, model: &Model<f32>) -> Result<()> {
    w.write_all(CKPT_MAGIC)?;
    let json = serde_json::to_vec(&model.config).map_err(|e| Error::invalid(e.to_string()))?;
    put_u32(w, json.len())?;
    w.write_all(&json)?;
    put_u32(w, model.params.len())?;
    for (name, t) in model.params.names.iter().zip(&model.params.tensors) {
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.shape.len())?;
        for d in &t.shape {
            put_u32(w, *d)?;
        }
        let rows = t.shape.first().copied().unwrap_or(1);
        let cols = if rows == 0 { 0 } else { t.numel() / rows };
        write_grid(w, rows, cols, &t.data)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Model<f32>> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|e| Error::format("CKPT1", format!("truncated header: {e}")))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::format("CKPT1", "bad magic"));
    }
    let len = get_u32(r)?;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|e| Error::format("CKPT1", format!("truncated config: {e}")))?;
    let config: ModelConfig =
        serde_json::from_slice(&json).map_err(|e| Error::format("CKPT1", format!("bad config: {e}")))?;
    let mut model = Model::<f32>::new(config)?;
    let count = get_u32(r)?;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let n = get_u32(r)?;
        let mut name = vec![0u8; n];
        r.read_exact(&mut name)
            .map_err(|e| Error::format("CKPT1", format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::format("CKPT1", "name is not UTF-8"))?;
        let ndim = get_u32(r)?;
        let shape = (0..ndim).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        let (_, _, data) = read_grid(r)?;
        let t = Tensor::new(shape, data).map_err(|e| Error::format("CKPT1", format!("tensor '{name}': {e}")))?;
        named.push((name, t));
    }
    model.load_params(named)?;
    Ok(model)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
