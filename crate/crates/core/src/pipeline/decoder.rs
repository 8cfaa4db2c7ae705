//! Segmentation head.
//!
//! Every level's volume is averaged over its support axes, upsampled to the
//! finest query grid and stacked as channels. A 3×3 convolution with tanh
//! mixes the levels, the result is upsampled to image size, and a second
//! 3×3 convolution produces two logits per pixel.

use rand::Rng;

use crate::aggregation::{prefixed, prefixed_mut, Conv2d, Parameterized, Volume};
use crate::aggregation::{grid_coord, sample_backward_raw, sample_raw};
use crate::error::{DacmError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub mix: Conv2d,
    pub head: Conv2d,
    pub output_size: usize,
}

impl Decoder {
    /// The head starts at zero so the first logits are exactly zero.
    pub fn new<R: Rng + ?Sized>(levels: usize, hidden: usize, output_size: usize, rng: &mut R) -> Self {
        Decoder {
            mix: Conv2d::random(levels, hidden, 3, 1.0, rng),
            head: Conv2d::zeros(hidden, 2, 3),
            output_size,
        }
    }

    pub fn levels(&self) -> usize {
        self.mix.c_in
    }
}

impl Parameterized for Decoder {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("mix", self.mix.named_params());
        v.extend(prefixed("head", self.head.named_params()));
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed_mut("mix", self.mix.named_params_mut());
        v.extend(prefixed_mut("head", self.head.named_params_mut()));
        v
    }
}

fn resize_coords(h: usize, w: usize) -> Vec<f64> {
    let t = h * w;
    let mut c = vec![0.0; 2 * t];
    for i in 0..h {
        for j in 0..w {
            c[i * w + j] = grid_coord(j, w);
            c[t + i * w + j] = grid_coord(i, h);
        }
    }
    c
}

/// Bilinear resize of a `c × h × w` buffer to `c × oh × ow`.
pub fn upsample(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return x.to_vec();
    }
    sample_raw(x, c, h, w, &resize_coords(oh, ow), oh * ow)
}

/// Adjoint of [`upsample`].
pub fn upsample_backward(dy: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return dy.to_vec();
    }
    let coords = resize_coords(oh, ow);
    let mut dx = vec![0.0; c * h * w];
    let mut dc = vec![0.0; coords.len()];
    let zero = vec![0.0; c * h * w];
    sample_backward_raw(&zero, c, h, w, &coords, oh * ow, dy, &mut dx, &mut dc);
    dx
}

fn support_mean(v: &Volume) -> Vec<f64> {
    let ns = v.support_positions();
    v.channel(0).chunks(ns).map(|row| row.iter().sum::<f64>() / ns as f64).collect()
}

pub struct DecoderCache {
    grid: usize,
    dims: Vec<[usize; 4]>,
    stacked: Vec<f64>,
    hidden: Vec<f64>,
    upsampled: Vec<f64>,
}

fn check(dec: &Decoder, volumes: &[Volume]) -> Result<usize> {
    if volumes.len() != dec.levels() {
        return Err(DacmError::dim(format!(
            "decoder expects {} levels, got {}",
            dec.levels(),
            volumes.len()
        )));
    }
    let mut grid = 0;
    for v in volumes {
        let [hq, wq, _, _] = v.dims();
        if v.channels() != 1 || hq != wq || hq == 0 {
            return Err(DacmError::dim(format!(
                "decoder needs single-channel square volumes, got {}x{:?}",
                v.channels(),
                v.dims()
            )));
        }
        grid = grid.max(hq);
    }
    Ok(grid)
}

/// `2 × H × W` logits and the forward cache.
pub fn decode_with_cache(dec: &Decoder, volumes: &[Volume]) -> Result<(Tensor, DecoderCache)> {
    let grid = check(dec, volumes)?;
    let g2 = grid * grid;
    let mut stacked = vec![0.0; volumes.len() * g2];
    for (l, v) in volumes.iter().enumerate() {
        let [hq, wq, _, _] = v.dims();
        let m = support_mean(v);
        stacked[l * g2..(l + 1) * g2].copy_from_slice(&upsample(&m, 1, hq, wq, grid, grid));
    }
    let mut hidden = dec.mix.forward(&stacked, grid, grid);
    hidden.iter_mut().for_each(|x| *x = x.tanh());
    let n = dec.output_size;
    let upsampled = upsample(&hidden, dec.mix.c_out, grid, grid, n, n);
    let logits = dec.head.forward(&upsampled, n, n);
    let cache = DecoderCache {
        grid,
        dims: volumes.iter().map(|v| v.dims()).collect(),
        stacked,
        hidden,
        upsampled,
    };
    Ok((Tensor::from_vec(&[2, n, n], logits)?, cache))
}

pub fn decode(dec: &Decoder, volumes: &[Volume]) -> Result<Tensor> {
    Ok(decode_with_cache(dec, volumes)?.0)
}

/// Accumulates parameter gradients into `grad` and returns one cotangent
/// volume per level.
pub fn decode_backward(
    dec: &Decoder,
    cache: &DecoderCache,
    dlogits: &Tensor,
    grad: &mut Decoder,
) -> Result<Vec<Volume>> {
    let n = dec.output_size;
    if dlogits.shape() != [2, n, n] {
        return Err(DacmError::dim(format!(
            "logit cotangent shape {:?}, expected [2, {n}, {n}]",
            dlogits.shape()
        )));
    }
    let grid = cache.grid;
    let g2 = grid * grid;
    let hid = dec.mix.c_out;
    let dup = dec.head.backward(&cache.upsampled, n, n, dlogits.data(), &mut grad.head);
    let mut dhidden = upsample_backward(&dup, hid, grid, grid, n, n);
    for (d, h) in dhidden.iter_mut().zip(&cache.hidden) {
        *d *= 1.0 - h * h;
    }
    let dstack = dec.mix.backward(&cache.stacked, grid, grid, &dhidden, &mut grad.mix);
    let mut out = Vec::with_capacity(cache.dims.len());
    for (l, &dims) in cache.dims.iter().enumerate() {
        let [hq, wq, hs, ws] = dims;
        let ns = hs * ws;
        let dm = upsample_backward(&dstack[l * g2..(l + 1) * g2], 1, hq, wq, grid, grid);
        let mut dv = vec![0.0; hq * wq * ns];
        for (q, g) in dm.iter().enumerate() {
            dv[q * ns..(q + 1) * ns].iter_mut().for_each(|x| *x = g / ns as f64);
        }
        out.push(Volume::new(1, dims, dv)?);
    }
    Ok(out)
}
