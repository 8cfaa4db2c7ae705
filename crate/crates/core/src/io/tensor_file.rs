//! Binary tensor container: `"DACM"`, version byte, rank byte, rank × u32
//! little-endian dims, then the row-major payload as f64 little-endian.

use std::path::Path;

use crate::error::{DacmError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DACM";
pub const VERSION: u8 = 1;
pub const MAX_RANK: usize = 6;

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let rank = t.shape().len();
    if rank > MAX_RANK {
        return Err(DacmError::Format(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut out = Vec::with_capacity(6 + 4 * rank + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(rank as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| DacmError::Format(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let fmt = |m: String| DacmError::Format(m);
    if bytes.len() < 6 {
        return Err(fmt(format!("header truncated ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(fmt("bad magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(fmt(format!("unsupported version {}", bytes[4])));
    }
    let rank = bytes[5] as usize;
    if rank > MAX_RANK {
        return Err(fmt(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let body = &bytes[6..];
    if body.len() < 4 * rank {
        return Err(fmt("dims truncated".into()));
    }
    let shape: Vec<usize> = body[..4 * rank]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| fmt("element count overflows".into()))?;
    let payload = &body[4 * rank..];
    if n.checked_mul(8) != Some(payload.len()) {
        return Err(fmt(format!(
            "payload has {} bytes, dims {:?} need {}",
            payload.len(),
            shape,
            n.saturating_mul(8)
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::from_vec(&shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_tensor(t)?)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&std::fs::read(path)?)
}
