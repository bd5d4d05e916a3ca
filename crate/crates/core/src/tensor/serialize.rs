//! Binary tensor blocks: `rank: u64`, `extents: [u64; rank]`, then the
//! values as little-endian IEEE-754 doubles in row-major order.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

/// Refuse absurd headers from corrupted files before allocating.
const MAX_RANK: u64 = 16;
const MAX_ELEMS: u64 = 1 << 34;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    write_raw(w, t.shape(), &t.data())
}

pub fn write_raw<W: Write>(w: &mut W, shape: &[usize], data: &[f64]) -> Result<()> {
    w.write_all(&(shape.len() as u64).to_le_bytes())?;
    for &e in shape {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(data.len() * 8);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated tensor block".into())
    } else {
        Error::Io(e)
    }
}

pub fn read_raw<R: Read>(r: &mut R) -> Result<(Vec<usize>, Vec<f64>)> {
    let rank = read_u64(r)?;
    if rank > MAX_RANK {
        return Err(Error::Format(format!("tensor rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut total: u64 = 1;
    for _ in 0..rank {
        let e = read_u64(r)?;
        total = total.checked_mul(e).filter(|&t| t <= MAX_ELEMS).ok_or_else(|| Error::Format("tensor too large".into()))?;
        shape.push(e as usize);
    }
    let mut bytes = vec![0u8; total as usize * 8];
    r.read_exact(&mut bytes).map_err(truncated)?;
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    Ok((shape, data))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let (shape, data) = read_raw(r)?;
    Tensor::from_vec(data, &shape)
}
