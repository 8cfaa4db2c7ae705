//! 8-bit binary greyscale (P5) dumps of 2D maps.

use std::path::Path;

use crate::error::{DacmError, Result};
use crate::tensor::Tensor;

/// Min-max scaled pixels, `round((v - min) / (max - min) · 255)`; a range
/// below `epsilon` gives all zeros.
pub fn scale_to_u8(values: &[f64], epsilon: f64) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range >= epsilon) {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|v| ((v - lo) / range * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

pub fn encode_pgm(map: &Tensor, epsilon: f64) -> Result<Vec<u8>> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(DacmError::dim(format!("PGM needs a 2D tensor, got shape {s:?}")));
    }
    if map.data().iter().any(|v| !v.is_finite()) {
        return Err(DacmError::Numerical("non-finite value in map".into()));
    }
    let (h, w) = (s[0], s[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(scale_to_u8(map.data(), epsilon));
    Ok(out)
}

pub fn write_pgm(path: &Path, map: &Tensor, epsilon: f64) -> Result<()> {
    std::fs::write(path, encode_pgm(map, epsilon)?)?;
    Ok(())
}
