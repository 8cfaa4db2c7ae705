//! Differentiable bilinear sampling at normalised coordinates.
//!
//! Coordinates are `(x, y)` pairs in `[-1, 1]`, with `(-1, -1)` the centre of
//! the top-left cell and `(1, 1)` the centre of the bottom-right cell.
//! Coordinates outside that range are clamped to the border, which gives a
//! zero coordinate gradient there.

use crate::error::{DacmError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Axis {
    lo: usize,
    hi: usize,
    frac: f64,
    /// d(pixel position)/d(normalised coordinate), zero when clamped
    scale: f64,
}

#[inline]
fn axis(coord: f64, n: usize) -> Axis {
    if n == 1 {
        return Axis {
            lo: 0,
            hi: 0,
            frac: 0.0,
            scale: 0.0,
        };
    }
    let half = (n - 1) as f64 / 2.0;
    let (c, scale) = if coord < -1.0 {
        (-1.0, 0.0)
    } else if coord > 1.0 {
        (1.0, 0.0)
    } else {
        (coord, half)
    };
    let p = (c + 1.0) * half;
    let lo = (p.floor() as usize).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    Axis {
        lo,
        hi,
        frac: p - lo as f64,
        scale,
    }
}

/// Normalised coordinate of cell `i` on an axis of length `n`.
#[inline]
pub(crate) fn grid_coord(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// `grid` is `c × h × w`, `coords` is `2 × t` (x row then y row); returns
/// `c × t`.
pub(crate) fn sample_raw(grid: &[f64], c: usize, h: usize, w: usize, coords: &[f64], t: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; c * t];
    for p in 0..t {
        let ax = axis(coords[p], w);
        let ay = axis(coords[t + p], h);
        let w00 = (1.0 - ay.frac) * (1.0 - ax.frac);
        let w01 = (1.0 - ay.frac) * ax.frac;
        let w10 = ay.frac * (1.0 - ax.frac);
        let w11 = ay.frac * ax.frac;
        let i00 = ay.lo * w + ax.lo;
        let i01 = ay.lo * w + ax.hi;
        let i10 = ay.hi * w + ax.lo;
        let i11 = ay.hi * w + ax.hi;
        for ch in 0..c {
            let g = &grid[ch * hw..(ch + 1) * hw];
            out[ch * t + p] = w00 * g[i00] + w01 * g[i01] + w10 * g[i10] + w11 * g[i11];
        }
    }
    out
}

/// Reverse pass of [`sample_raw`]: accumulates into `dgrid` (`c × h × w`)
/// and `dcoords` (`2 × t`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn sample_backward_raw(
    grid: &[f64],
    c: usize,
    h: usize,
    w: usize,
    coords: &[f64],
    t: usize,
    dout: &[f64],
    dgrid: &mut [f64],
    dcoords: &mut [f64],
) {
    let hw = h * w;
    for p in 0..t {
        let ax = axis(coords[p], w);
        let ay = axis(coords[t + p], h);
        let (fx, fy) = (ax.frac, ay.frac);
        let w00 = (1.0 - fy) * (1.0 - fx);
        let w01 = (1.0 - fy) * fx;
        let w10 = fy * (1.0 - fx);
        let w11 = fy * fx;
        let i00 = ay.lo * w + ax.lo;
        let i01 = ay.lo * w + ax.hi;
        let i10 = ay.hi * w + ax.lo;
        let i11 = ay.hi * w + ax.hi;
        let mut gx = 0.0;
        let mut gy = 0.0;
        for ch in 0..c {
            let go = dout[ch * t + p];
            if go == 0.0 {
                continue;
            }
            let base = ch * hw;
            let g = &grid[base..base + hw];
            let dg = &mut dgrid[base..base + hw];
            dg[i00] += w00 * go;
            dg[i01] += w01 * go;
            dg[i10] += w10 * go;
            dg[i11] += w11 * go;
            gx += go * ((1.0 - fy) * (g[i01] - g[i00]) + fy * (g[i11] - g[i10]));
            gy += go * ((1.0 - fx) * (g[i10] - g[i00]) + fx * (g[i11] - g[i01]));
        }
        dcoords[p] += gx * ax.scale;
        dcoords[t + p] += gy * ay.scale;
    }
}

fn check(grid: &Tensor, coords: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let gs = grid.shape();
    let cs = coords.shape();
    if gs.len() != 3 || cs.len() != 3 || cs[0] != 2 {
        return Err(DacmError::dim(format!(
            "bilinear_sample expects grid c×h×w and coords 2×h'×w', got {gs:?} and {cs:?}"
        )));
    }
    if coords.data().iter().any(|v| !v.is_finite()) {
        return Err(DacmError::Numerical("non-finite sampling coordinate".into()));
    }
    Ok((gs[0], gs[1], gs[2], cs[1], cs[2]))
}

/// Samples a `c × h × w` grid at `2 × h' × w'` normalised coordinates.
pub fn bilinear_sample(grid: &Tensor, coords: &Tensor) -> Result<Tensor> {
    let (c, h, w, h2, w2) = check(grid, coords)?;
    let out = sample_raw(grid.data(), c, h, w, coords.data(), h2 * w2);
    Tensor::from_vec(&[c, h2, w2], out)
}

/// Gradients of `Σ upstream ⊙ bilinear_sample(grid, coords)` with respect to
/// the grid and the coordinates.
pub fn bilinear_sample_backward(grid: &Tensor, coords: &Tensor, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c, h, w, h2, w2) = check(grid, coords)?;
    if upstream.shape() != [c, h2, w2] {
        return Err(DacmError::dim(format!(
            "upstream shape {:?} does not match output [{c}, {h2}, {w2}]",
            upstream.shape()
        )));
    }
    let mut dgrid = Tensor::zeros(grid.shape());
    let mut dcoords = Tensor::zeros(coords.shape());
    sample_backward_raw(
        grid.data(),
        c,
        h,
        w,
        coords.data(),
        h2 * w2,
        upstream.data(),
        dgrid.data_mut(),
        dcoords.data_mut(),
    );
    Ok((dgrid, dcoords))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid3() -> Tensor {
        Tensor::from_vec(&[1, 3, 3], (0..9).map(|v| (v * v) as f64).collect()).unwrap()
    }

    #[test]
    fn exact_grid_positions() {
        let g = grid3();
        let mut coords = Vec::new();
        let xs: Vec<f64> = (0..9).map(|p| grid_coord(p % 3, 3)).collect();
        let ys: Vec<f64> = (0..9).map(|p| grid_coord(p / 3, 3)).collect();
        coords.extend(xs);
        coords.extend(ys);
        let c = Tensor::from_vec(&[2, 3, 3], coords).unwrap();
        let out = bilinear_sample(&g, &c).unwrap();
        assert_eq!(out.data(), g.data());
    }

    #[test]
    fn midpoint_is_mean_of_four() {
        let g = grid3();
        let c = Tensor::from_vec(&[2, 1, 1], vec![-0.5, 0.5]).unwrap();
        let out = bilinear_sample(&g, &c).unwrap();
        // cells (1,0),(1,1),(2,0),(2,1) -> 9,16,36,49
        assert!((out.data()[0] - (9.0 + 16.0 + 36.0 + 49.0) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_clamps_to_border() {
        let g = grid3();
        let c = Tensor::from_vec(&[2, 1, 1], vec![5.0, -7.0]).unwrap();
        let out = bilinear_sample(&g, &c).unwrap();
        assert_eq!(out.data()[0], 4.0);
        let (_, dc) = bilinear_sample_backward(&g, &c, &Tensor::from_vec(&[1, 1, 1], vec![1.0]).unwrap()).unwrap();
        assert_eq!(dc.data(), &[0.0, 0.0]);
    }

    #[test]
    fn rejects_bad_shapes() {
        let g = grid3();
        let c = Tensor::zeros(&[3, 1, 1]);
        assert!(bilinear_sample(&g, &c).is_err());
    }
}
