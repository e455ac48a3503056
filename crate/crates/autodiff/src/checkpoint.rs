//! Binary tensor checkpoints.
//!
//! Layout (little-endian): `"SAFL"`, record byte `'C'`, `u32` format version,
//! `u32` tensor count, then per tensor: `u32` name length, UTF-8 name, `u8`
//! rank, `rank × u32` dims, `f32` payload.

use std::io::{Read, Write};

use crate::error::{AutodiffError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SAFL";
pub const RECORD_CHECKPOINT: u8 = b'C';
pub const FORMAT_VERSION: u32 = 1;

/// Writes the common `"SAFL" + record + version` header.
pub fn write_header<W: Write>(w: &mut W, record: u8) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[record])?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    Ok(())
}

/// Reads and validates the common header; returns the format version.
pub fn read_header<R: Read>(r: &mut R, record: u8) -> Result<u32> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(AutodiffError::Checkpoint("bad magic".into()));
    }
    let kind = read_u8(r)?;
    if kind != record {
        return Err(AutodiffError::Checkpoint(format!(
            "record type '{}' where '{}' was expected",
            kind as char, record as char
        )));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(AutodiffError::Checkpoint(format!(
            "format version {version}, supported {FORMAT_VERSION}"
        )));
    }
    Ok(version)
}

pub fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

pub fn write_checkpoint<W: Write, T: Scalar>(w: &mut W, tensors: &[(String, &Tensor<T>)]) -> Result<()> {
    write_header(w, RECORD_CHECKPOINT)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| AutodiffError::Checkpoint(format!("rank of `{name}` exceeds 255")))?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read, T: Scalar>(r: &mut R) -> Result<Vec<(String, Tensor<T>)>> {
    read_header(r, RECORD_CHECKPOINT)?;
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| AutodiffError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = read_u8(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}
