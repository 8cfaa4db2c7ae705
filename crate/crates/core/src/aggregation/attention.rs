//! Deformable multi-head attention on a single 2D slice.
//!
//! An offset network predicts one `(Δx, Δy)` field per head. Keys and values
//! for a head are projected from the slice bilinearly resampled at the
//! shifted reference grid; queries come from the unshifted slice.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::bilinear::{grid_coord, sample_backward_raw, sample_raw};
use super::conv::Conv2d;
use super::params::{prefixed, prefixed_mut, Parameterized};
use crate::error::{DacmError, Result};
use crate::tensor::Tensor;

/// Two convolutions producing `2·heads` offset channels, bounded by
/// `max_offset · tanh(·)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetNet {
    /// 3×3, `c → hidden`, followed by tanh
    pub conv1: Conv2d,
    /// 1×1, `hidden → 2·heads`
    pub conv2: Conv2d,
}

impl Parameterized for OffsetNet {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("conv1", self.conv1.named_params());
        v.extend(prefixed("conv2", self.conv2.named_params()));
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed_mut("conv1", self.conv1.named_params_mut());
        v.extend(prefixed_mut("conv2", self.conv2.named_params_mut()));
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub heads: usize,
    pub head_dim: usize,
    pub in_channels: usize,
    pub max_offset: f64,
    pub offset: OffsetNet,
    /// `[c, c']` projections and `[c']` biases
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
}

pub const DEFAULT_MAX_OFFSET: f64 = 0.5;

impl AttentionParams {
    pub fn zeros(in_channels: usize, heads: usize, head_dim: usize, offset_hidden: usize) -> Self {
        let cp = heads * head_dim;
        AttentionParams {
            heads,
            head_dim,
            in_channels,
            max_offset: DEFAULT_MAX_OFFSET,
            offset: OffsetNet {
                conv1: Conv2d::zeros(in_channels, offset_hidden, 3),
                conv2: Conv2d::zeros(offset_hidden, 2 * heads, 1),
            },
            w_q: Tensor::zeros(&[in_channels, cp]),
            b_q: Tensor::zeros(&[cp]),
            w_k: Tensor::zeros(&[in_channels, cp]),
            b_k: Tensor::zeros(&[cp]),
            w_v: Tensor::zeros(&[in_channels, cp]),
            b_v: Tensor::zeros(&[cp]),
        }
    }

    /// Random projections; `offset_gain` scales the offset-network weights
    /// (zero gives a non-deformable start).
    pub fn random<R: Rng + ?Sized>(
        in_channels: usize,
        heads: usize,
        head_dim: usize,
        offset_hidden: usize,
        offset_gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut p = AttentionParams::zeros(in_channels, heads, head_dim, offset_hidden);
        p.offset.conv1 = Conv2d::random(in_channels, offset_hidden, 3, 1.0, rng);
        p.offset.conv2 = Conv2d::random(offset_hidden, 2 * heads, 1, offset_gain, rng);
        let normal = Normal::new(0.0, 1.0 / (in_channels as f64).sqrt()).expect("valid std");
        for t in [&mut p.w_q, &mut p.w_k, &mut p.w_v] {
            for v in t.data_mut() {
                *v = normal.sample(rng);
            }
        }
        p
    }

    pub fn projected_channels(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let cp = self.projected_channels();
        let c = self.in_channels;
        let ok = self.heads > 0
            && self.head_dim > 0
            && self.w_q.shape() == [c, cp]
            && self.w_k.shape() == [c, cp]
            && self.w_v.shape() == [c, cp]
            && self.b_q.shape() == [cp]
            && self.b_k.shape() == [cp]
            && self.b_v.shape() == [cp]
            && self.offset.conv1.c_in == c
            && self.offset.conv2.c_in == self.offset.conv1.c_out
            && self.offset.conv2.c_out == 2 * self.heads
            && self.max_offset >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(DacmError::dim("inconsistent attention parameter shapes"))
        }
    }
}

impl Parameterized for AttentionParams {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("offset", self.offset.named_params());
        v.push(("w_q".into(), &self.w_q));
        v.push(("b_q".into(), &self.b_q));
        v.push(("w_k".into(), &self.w_k));
        v.push(("b_k".into(), &self.b_k));
        v.push(("w_v".into(), &self.w_v));
        v.push(("b_v".into(), &self.b_v));
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed_mut("offset", self.offset.named_params_mut());
        v.push(("w_q".into(), &mut self.w_q));
        v.push(("b_q".into(), &mut self.b_q));
        v.push(("w_k".into(), &mut self.w_k));
        v.push(("b_k".into(), &mut self.b_k));
        v.push(("w_v".into(), &mut self.w_v));
        v.push(("b_v".into(), &mut self.b_v));
        v
    }
}

pub(crate) struct OffsetCache {
    hidden: Vec<f64>,
    raw: Vec<f64>,
    pub(crate) offsets: Vec<f64>,
}

pub(crate) fn offset_forward(x: &[f64], h: usize, w: usize, p: &AttentionParams) -> OffsetCache {
    let mut hidden = p.offset.conv1.forward(x, h, w);
    hidden.iter_mut().for_each(|v| *v = v.tanh());
    let raw = p.offset.conv2.forward(&hidden, h, w);
    let offsets = raw.iter().map(|v| p.max_offset * v.tanh()).collect();
    OffsetCache {
        hidden,
        raw,
        offsets,
    }
}

/// Accumulates offset-network parameter gradients and returns `∂L/∂x`.
pub(crate) fn offset_backward(
    x: &[f64],
    h: usize,
    w: usize,
    p: &AttentionParams,
    cache: &OffsetCache,
    doffsets: &[f64],
    grad: &mut AttentionParams,
) -> Vec<f64> {
    let draw: Vec<f64> = cache
        .raw
        .iter()
        .zip(doffsets)
        .map(|(r, g)| {
            let t = r.tanh();
            g * p.max_offset * (1.0 - t * t)
        })
        .collect();
    let mut dhidden = p.offset.conv2.backward(&cache.hidden, h, w, &draw, &mut grad.offset.conv2);
    for (d, a) in dhidden.iter_mut().zip(&cache.hidden) {
        *d *= 1.0 - a * a;
    }
    p.offset.conv1.backward(x, h, w, &dhidden, &mut grad.offset.conv1)
}

fn check_slice(slice: &Tensor, p: &AttentionParams) -> Result<(usize, usize)> {
    p.validate()?;
    let s = slice.shape();
    if s.len() != 3 || s[0] != p.in_channels || s[1] == 0 || s[2] == 0 {
        return Err(DacmError::dim(format!(
            "slice shape {s:?} incompatible with {} input channels",
            p.in_channels
        )));
    }
    Ok((s[1], s[2]))
}

/// `n × 2 × h × w` offsets for a `c × h × w` slice.
pub fn offset_network(slice: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    let (h, w) = check_slice(slice, params)?;
    let cache = offset_forward(slice.data(), h, w, params);
    Tensor::from_vec(&[params.heads, 2, h, w], cache.offsets)
}

/// Gradients of `Σ upstream ⊙ offset_network(slice)`.
pub fn offset_network_backward(
    slice: &Tensor,
    params: &AttentionParams,
    upstream: &Tensor,
) -> Result<(Tensor, AttentionParams)> {
    let (h, w) = check_slice(slice, params)?;
    if upstream.shape() != [params.heads, 2, h, w] {
        return Err(DacmError::dim(format!(
            "upstream shape {:?} does not match offsets",
            upstream.shape()
        )));
    }
    let cache = offset_forward(slice.data(), h, w, params);
    let mut grad = super::params::zeros_like(params);
    let dx = offset_backward(slice.data(), h, w, params, &cache, upstream.data(), &mut grad);
    Ok((Tensor::from_vec(slice.shape(), dx)?, grad))
}

pub(crate) struct AttentionCache {
    h: usize,
    w: usize,
    offsets: OffsetCache,
    coords: Vec<Vec<f64>>,
    sampled: Vec<Vec<f64>>,
    /// `T × c'`
    q: Vec<f64>,
    /// per head `T × d`
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// per head `T × T`, row-stochastic
    pub(crate) attn: Vec<Vec<f64>>,
}

/// Forward pass on raw channel-major data; output is `c' × T`.
pub(crate) fn attention_forward(x: &[f64], h: usize, w: usize, p: &AttentionParams) -> (Vec<f64>, AttentionCache) {
    let c = p.in_channels;
    let t = h * w;
    let n = p.heads;
    let d = p.head_dim;
    let cp = n * d;
    let offsets = offset_forward(x, h, w, p);

    let wq = p.w_q.data();
    let wk = p.w_k.data();
    let wv = p.w_v.data();

    let mut q = vec![0.0; t * cp];
    for tok in 0..t {
        let row = &mut q[tok * cp..(tok + 1) * cp];
        row.copy_from_slice(p.b_q.data());
        for ch in 0..c {
            let xv = x[ch * t + tok];
            if xv == 0.0 {
                continue;
            }
            let wrow = &wq[ch * cp..(ch + 1) * cp];
            for (r, wv) in row.iter_mut().zip(wrow) {
                *r += xv * wv;
            }
        }
    }

    let scale = 1.0 / (d as f64).sqrt();
    let mut coords_all = Vec::with_capacity(n);
    let mut sampled_all = Vec::with_capacity(n);
    let mut k_all = Vec::with_capacity(n);
    let mut v_all = Vec::with_capacity(n);
    let mut attn_all = Vec::with_capacity(n);
    let mut out = vec![0.0; cp * t];

    for head in 0..n {
        let mut coords = vec![0.0; 2 * t];
        let ox = &offsets.offsets[(2 * head) * t..(2 * head + 1) * t];
        let oy = &offsets.offsets[(2 * head + 1) * t..(2 * head + 2) * t];
        for i in 0..h {
            for j in 0..w {
                let tok = i * w + j;
                coords[tok] = grid_coord(j, w) + ox[tok];
                coords[t + tok] = grid_coord(i, h) + oy[tok];
            }
        }
        let xs = sample_raw(x, c, h, w, &coords, t);
        let col0 = head * d;
        let mut kh = vec![0.0; t * d];
        let mut vh = vec![0.0; t * d];
        for tok in 0..t {
            for e in 0..d {
                kh[tok * d + e] = p.b_k.data()[col0 + e];
                vh[tok * d + e] = p.b_v.data()[col0 + e];
            }
            for ch in 0..c {
                let xv = xs[ch * t + tok];
                let base = ch * cp + col0;
                for e in 0..d {
                    kh[tok * d + e] += xv * wk[base + e];
                    vh[tok * d + e] += xv * wv[base + e];
                }
            }
        }
        let mut a = vec![0.0; t * t];
        for i in 0..t {
            let qi = &q[i * cp + col0..i * cp + col0 + d];
            let row = &mut a[i * t..(i + 1) * t];
            let mut mx = f64::NEG_INFINITY;
            for (j, r) in row.iter_mut().enumerate() {
                let kj = &kh[j * d..(j + 1) * d];
                let s: f64 = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                *r = s;
                mx = mx.max(s);
            }
            let mut sum = 0.0;
            for r in row.iter_mut() {
                *r = (*r - mx).exp();
                sum += *r;
            }
            for r in row.iter_mut() {
                *r /= sum;
            }
            for e in 0..d {
                let mut acc = 0.0;
                for j in 0..t {
                    acc += row[j] * vh[j * d + e];
                }
                out[(col0 + e) * t + i] = acc;
            }
        }
        coords_all.push(coords);
        sampled_all.push(xs);
        k_all.push(kh);
        v_all.push(vh);
        attn_all.push(a);
    }

    let cache = AttentionCache {
        h,
        w,
        offsets,
        coords: coords_all,
        sampled: sampled_all,
        q,
        k: k_all,
        v: v_all,
        attn: attn_all,
    };
    (out, cache)
}

/// Reverse pass; accumulates into `grad` and returns `∂L/∂x` (`c × T`).
pub(crate) fn attention_backward(
    x: &[f64],
    p: &AttentionParams,
    cache: &AttentionCache,
    dout: &[f64],
    grad: &mut AttentionParams,
) -> Vec<f64> {
    let (h, w) = (cache.h, cache.w);
    let c = p.in_channels;
    let t = h * w;
    let n = p.heads;
    let d = p.head_dim;
    let cp = n * d;
    let scale = 1.0 / (d as f64).sqrt();
    let wq = p.w_q.data();
    let wk = p.w_k.data();
    let wv = p.w_v.data();

    let mut dx = vec![0.0; c * t];
    let mut dq = vec![0.0; t * cp];
    let mut doffsets = vec![0.0; 2 * n * t];

    for head in 0..n {
        let col0 = head * d;
        let a = &cache.attn[head];
        let kh = &cache.k[head];
        let vh = &cache.v[head];
        let xs = &cache.sampled[head];

        // dZ for this head, token-major
        let mut dz = vec![0.0; t * d];
        for e in 0..d {
            for i in 0..t {
                dz[i * d + e] = dout[(col0 + e) * t + i];
            }
        }
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut ds_row = vec![0.0; t];
        for i in 0..t {
            let arow = &a[i * t..(i + 1) * t];
            let dzi = &dz[i * d..(i + 1) * d];
            if dzi.iter().all(|v| *v == 0.0) {
                continue;
            }
            let mut dot = 0.0;
            for j in 0..t {
                let vj = &vh[j * d..(j + 1) * d];
                let da: f64 = dzi.iter().zip(vj).map(|(x, y)| x * y).sum();
                ds_row[j] = da;
                dot += da * arow[j];
                let aij = arow[j];
                for e in 0..d {
                    dv[j * d + e] += aij * dzi[e];
                }
            }
            let qi = &cache.q[i * cp + col0..i * cp + col0 + d];
            for j in 0..t {
                let g = arow[j] * (ds_row[j] - dot) * scale;
                if g == 0.0 {
                    continue;
                }
                let kj = &kh[j * d..(j + 1) * d];
                for e in 0..d {
                    dq[i * cp + col0 + e] += g * kj[e];
                    dk[j * d + e] += g * qi[e];
                }
            }
        }

        let mut dxs = vec![0.0; c * t];
        {
            let gwk = grad.w_k.data_mut();
            for tok in 0..t {
                for ch in 0..c {
                    let xv = xs[ch * t + tok];
                    let base = ch * cp + col0;
                    for e in 0..d {
                        gwk[base + e] += xv * dk[tok * d + e];
                    }
                }
            }
        }
        {
            let gwv = grad.w_v.data_mut();
            for tok in 0..t {
                for ch in 0..c {
                    let xv = xs[ch * t + tok];
                    let base = ch * cp + col0;
                    for e in 0..d {
                        gwv[base + e] += xv * dv[tok * d + e];
                    }
                }
            }
        }
        for tok in 0..t {
            for e in 0..d {
                grad.b_k.data_mut()[col0 + e] += dk[tok * d + e];
                grad.b_v.data_mut()[col0 + e] += dv[tok * d + e];
            }
            for ch in 0..c {
                let base = ch * cp + col0;
                let mut acc = 0.0;
                for e in 0..d {
                    acc += dk[tok * d + e] * wk[base + e] + dv[tok * d + e] * wv[base + e];
                }
                dxs[ch * t + tok] = acc;
            }
        }
        let mut dcoords = vec![0.0; 2 * t];
        sample_backward_raw(x, c, h, w, &cache.coords[head], t, &dxs, &mut dx, &mut dcoords);
        doffsets[(2 * head) * t..(2 * head + 2) * t].copy_from_slice(&dcoords);
    }

    {
        let gwq = grad.w_q.data_mut();
        for tok in 0..t {
            for ch in 0..c {
                let xv = x[ch * t + tok];
                if xv == 0.0 {
                    continue;
                }
                let wrow = &mut gwq[ch * cp..(ch + 1) * cp];
                for (g, d) in wrow.iter_mut().zip(&dq[tok * cp..(tok + 1) * cp]) {
                    *g += xv * d;
                }
            }
        }
    }
    for tok in 0..t {
        let dqr = &dq[tok * cp..(tok + 1) * cp];
        for (g, d) in grad.b_q.data_mut().iter_mut().zip(dqr) {
            *g += d;
        }
        for ch in 0..c {
            let wrow = &wq[ch * cp..(ch + 1) * cp];
            dx[ch * t + tok] += wrow.iter().zip(dqr).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    let dxo = offset_backward(x, h, w, p, &cache.offsets, &doffsets, grad);
    for (a, b) in dx.iter_mut().zip(dxo) {
        *a += b;
    }
    dx
}

/// Deformable multi-head attention on a `c × h × w` slice; returns
/// `c' × h × w` with heads concatenated along the channel axis.
pub fn deformable_attention_2d(slice: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    let (h, w) = check_slice(slice, params)?;
    let (out, _) = attention_forward(slice.data(), h, w, params);
    Tensor::from_vec(&[params.projected_channels(), h, w], out)
}

/// Per-head attention weights (`heads` matrices of `T × T`, row-major) from
/// one forward pass.
pub fn attention_weights(slice: &Tensor, params: &AttentionParams) -> Result<Vec<Vec<f64>>> {
    let (h, w) = check_slice(slice, params)?;
    let (_, cache) = attention_forward(slice.data(), h, w, params);
    Ok(cache.attn)
}

/// Gradients of `Σ upstream ⊙ deformable_attention_2d(slice)`.
pub fn deformable_attention_backward(
    slice: &Tensor,
    params: &AttentionParams,
    upstream: &Tensor,
) -> Result<(Tensor, AttentionParams)> {
    let (h, w) = check_slice(slice, params)?;
    if upstream.shape() != [params.projected_channels(), h, w] {
        return Err(DacmError::dim(format!(
            "upstream shape {:?} does not match attention output",
            upstream.shape()
        )));
    }
    let (_, cache) = attention_forward(slice.data(), h, w, params);
    let mut grad = super::params::zeros_like(params);
    let dx = attention_backward(slice.data(), params, &cache, upstream.data(), &mut grad);
    Ok((Tensor::from_vec(slice.shape(), dx)?, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_zero_offsets() {
        let p = AttentionParams::zeros(2, 4, 3, 5);
        let slice = Tensor::from_vec(&[2, 5, 5], (0..50).map(|v| v as f64 * 0.1).collect()).unwrap();
        let o = offset_network(&slice, &p).unwrap();
        assert_eq!(o.shape(), &[4, 2, 5, 5]);
        assert!(o.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn offsets_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = AttentionParams::random(1, 2, 2, 4, 50.0, &mut rng);
        p.max_offset = 0.3;
        let slice = Tensor::from_vec(&[1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let o = offset_network(&slice, &p).unwrap();
        assert!(o.data().iter().all(|v| v.abs() <= 0.3));
    }

    #[test]
    fn single_token_returns_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = AttentionParams::random(3, 2, 2, 3, 1.0, &mut rng);
        let x = [0.4, -1.2, 0.7];
        let slice = Tensor::from_vec(&[3, 1, 1], x.to_vec()).unwrap();
        let z = deformable_attention_2d(&slice, &p).unwrap();
        for col in 0..4 {
            let expected: f64 = (0..3).map(|c| x[c] * p.w_v.data()[c * 4 + col]).sum::<f64>() + p.b_v.data()[col];
            assert!((z.data()[col] - expected).abs() < 1e-12);
        }
        let a = attention_weights(&slice, &p).unwrap();
        assert!(a.iter().all(|h| h == &vec![1.0]));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = AttentionParams::random(2, 3, 2, 4, 1.0, &mut rng);
        let slice = Tensor::from_vec(&[2, 3, 4], (0..24).map(|_| rng.random::<f64>() * 3.0).collect()).unwrap();
        for head in attention_weights(&slice, &p).unwrap() {
            for row in head.chunks(12) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-10);
                assert!(row.iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn value_projection_gradient_is_matrix_product() {
        // With zero query/key weights attention is uniform, so ∂L/∂W_v = x̄ᵀ g
        // summed over tokens, where x̄ is the mean sampled token.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = AttentionParams::random(2, 1, 2, 3, 0.0, &mut rng);
        p.w_q.fill(0.0);
        p.w_k.fill(0.0);
        let slice = Tensor::from_vec(&[2, 2, 2], (0..8).map(|_| rng.random::<f64>()).collect()).unwrap();
        let up = Tensor::from_vec(&[2, 2, 2], (0..8).map(|_| rng.random::<f64>()).collect()).unwrap();
        let (_, g) = deformable_attention_backward(&slice, &p, &up).unwrap();
        for ch in 0..2 {
            let mean: f64 = slice.data()[ch * 4..ch * 4 + 4].iter().sum::<f64>() / 4.0;
            for col in 0..2 {
                let gsum: f64 = up.data()[col * 4..col * 4 + 4].iter().sum();
                assert!((g.w_v.data()[ch * 2 + col] - mean * gsum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = AttentionParams::random(1, 2, 2, 3, 1.0, &mut rng);
        let slice = Tensor::from_vec(&[1, 3, 3], (0..9).map(|_| rng.random::<f64>()).collect()).unwrap();
        let (dx, g) = deformable_attention_backward(&slice, &p, &Tensor::zeros(&[4, 3, 3])).unwrap();
        assert!(dx.data().iter().all(|v| *v == 0.0));
        assert!(g.flatten().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let p = AttentionParams::zeros(2, 2, 2, 2);
        assert!(deformable_attention_2d(&Tensor::zeros(&[1, 2, 2]), &p).is_err());
        assert!(deformable_attention_backward(&Tensor::zeros(&[2, 2, 2]), &p, &Tensor::zeros(&[3, 2, 2])).is_err());
    }
}
