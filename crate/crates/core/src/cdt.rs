//! `CDT1` tensor files: magic `CDT1`, little-endian `u32` rank, `rank` little-endian
//! `u32` dims, then the row-major little-endian `f32` payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CDT1";

pub fn encode<T: Real>(tensor: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * tensor.rank() + 4 * tensor.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let mut cursor = bytes;
    let mut word = [0u8; 4];
    let mut next = |what: &str| -> std::result::Result<[u8; 4], String> {
        cursor
            .read_exact(&mut word)
            .map_err(|_| format!("truncated while reading {what}"))?;
        Ok(word)
    };
    if &next("magic")? != MAGIC {
        return Err("bad magic".into());
    }
    let rank = u32::from_le_bytes(next("rank")?) as usize;
    if rank == 0 {
        return Err("rank must be positive".into());
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(next("dims")?) as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(f32::from_le_bytes(next("payload")?));
    }
    if !cursor.is_empty() {
        return Err(format!("{} trailing bytes", cursor.len()));
    }
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write<T: Real>(path: impl AsRef<Path>, tensor: &Tensor<T>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(tensor))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}
