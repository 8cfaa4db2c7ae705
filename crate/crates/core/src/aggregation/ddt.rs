//! Doubly deformable transformer over a single-channel 4D volume.
//!
//! The support branch (SDT) treats every `h_s × w_s` slice at a fixed query
//! position as one attention instance; the query branch (QDT) does the same
//! for every `h_q × w_q` slice at a fixed support position. Each slice is
//! lifted from one channel by a 1×1 embedding, attended, and projected back
//! to one channel. The layer output is the sum of both branches.

use rand::Rng;

use super::attention::{attention_backward, attention_forward, AttentionCache, AttentionParams};
use super::params::{prefixed, prefixed_mut, zeros_like, Parameterized};
use super::volume::Volume;
use crate::error::{DacmError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct DdtBranch {
    /// `[c_e]` lift weights and biases
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub attn: AttentionParams,
    /// `[c']` output projection and `[1]` bias
    pub proj_w: Tensor,
    pub proj_b: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdtConfig {
    pub embed_channels: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub offset_hidden: usize,
    pub max_offset: f64,
}

impl Default for DdtConfig {
    fn default() -> Self {
        DdtConfig {
            embed_channels: 8,
            heads: 4,
            head_dim: 8,
            offset_hidden: 8,
            max_offset: super::attention::DEFAULT_MAX_OFFSET,
        }
    }
}

impl DdtBranch {
    pub fn zeros(cfg: &DdtConfig) -> Self {
        let mut attn = AttentionParams::zeros(cfg.embed_channels, cfg.heads, cfg.head_dim, cfg.offset_hidden);
        attn.max_offset = cfg.max_offset;
        DdtBranch {
            embed_w: Tensor::zeros(&[cfg.embed_channels]),
            embed_b: Tensor::zeros(&[cfg.embed_channels]),
            attn,
            proj_w: Tensor::zeros(&[cfg.heads * cfg.head_dim]),
            proj_b: Tensor::zeros(&[1]),
        }
    }

    /// Random lift and attention weights with the output projection scaled by
    /// `proj_gain` (zero makes the branch output start at zero).
    pub fn random<R: Rng + ?Sized>(cfg: &DdtConfig, offset_gain: f64, proj_gain: f64, rng: &mut R) -> Self {
        let mut b = DdtBranch::zeros(cfg);
        let mut attn = AttentionParams::random(
            cfg.embed_channels,
            cfg.heads,
            cfg.head_dim,
            cfg.offset_hidden,
            offset_gain,
            rng,
        );
        attn.max_offset = cfg.max_offset;
        b.attn = attn;
        for v in b.embed_w.data_mut() {
            *v = 2.0 * rng.random::<f64>() - 1.0;
        }
        for v in b.embed_b.data_mut() {
            *v = 0.5 * (2.0 * rng.random::<f64>() - 1.0);
        }
        let cp = (cfg.heads * cfg.head_dim) as f64;
        for v in b.proj_w.data_mut() {
            *v = proj_gain * (2.0 * rng.random::<f64>() - 1.0) / cp.sqrt();
        }
        b
    }

    pub fn embed_channels(&self) -> usize {
        self.embed_w.len()
    }

    fn validate(&self) -> Result<()> {
        self.attn.validate()?;
        let ce = self.embed_w.len();
        if self.embed_b.len() != ce
            || self.attn.in_channels != ce
            || self.proj_w.len() != self.attn.projected_channels()
            || self.proj_b.len() != 1
        {
            return Err(DacmError::dim("inconsistent DDT branch shapes"));
        }
        Ok(())
    }
}

impl Parameterized for DdtBranch {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![
            ("embed_w".to_string(), &self.embed_w),
            ("embed_b".to_string(), &self.embed_b),
        ];
        v.extend(prefixed("attn", self.attn.named_params()));
        v.push(("proj_w".into(), &self.proj_w));
        v.push(("proj_b".into(), &self.proj_b));
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = vec![
            ("embed_w".to_string(), &mut self.embed_w),
            ("embed_b".to_string(), &mut self.embed_b),
        ];
        v.extend(prefixed_mut("attn", self.attn.named_params_mut()));
        v.push(("proj_w".into(), &mut self.proj_w));
        v.push(("proj_b".into(), &mut self.proj_b));
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdtParams {
    pub sdt: DdtBranch,
    pub qdt: DdtBranch,
}

impl DdtParams {
    pub fn random<R: Rng + ?Sized>(cfg: &DdtConfig, offset_gain: f64, proj_gain: f64, rng: &mut R) -> Self {
        DdtParams {
            sdt: DdtBranch::random(cfg, offset_gain, proj_gain, rng),
            qdt: DdtBranch::random(cfg, offset_gain, proj_gain, rng),
        }
    }
}

impl Parameterized for DdtParams {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("sdt", self.sdt.named_params());
        v.extend(prefixed("qdt", self.qdt.named_params()));
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed_mut("sdt", self.sdt.named_params_mut());
        v.extend(prefixed_mut("qdt", self.qdt.named_params_mut()));
        v
    }
}

struct SliceCache {
    raw: Vec<f64>,
    embedded: Vec<f64>,
    attended: Vec<f64>,
    attn: AttentionCache,
}

fn embed(raw: &[f64], b: &DdtBranch) -> Vec<f64> {
    let t = raw.len();
    let ce = b.embed_channels();
    let mut e = vec![0.0; ce * t];
    for ch in 0..ce {
        let (w, bias) = (b.embed_w.data()[ch], b.embed_b.data()[ch]);
        for (dst, x) in e[ch * t..(ch + 1) * t].iter_mut().zip(raw) {
            *dst = w * x + bias;
        }
    }
    e
}

/// Runs one branch on one `h × w` single-channel slice.
fn slice_forward(raw: Vec<f64>, h: usize, w: usize, b: &DdtBranch) -> (Vec<f64>, SliceCache) {
    let t = h * w;
    let embedded = embed(&raw, b);
    let (attended, attn) = attention_forward(&embedded, h, w, &b.attn);
    let cp = b.attn.projected_channels();
    let mut out = vec![b.proj_b.data()[0]; t];
    for k in 0..cp {
        let pw = b.proj_w.data()[k];
        for (o, z) in out.iter_mut().zip(&attended[k * t..(k + 1) * t]) {
            *o += pw * z;
        }
    }
    (
        out,
        SliceCache {
            raw,
            embedded,
            attended,
            attn,
        },
    )
}

fn slice_backward(cache: &SliceCache, b: &DdtBranch, dy: &[f64], grad: &mut DdtBranch) -> Vec<f64> {
    let t = dy.len();
    let cp = b.attn.projected_channels();
    grad.proj_b.data_mut()[0] += dy.iter().sum::<f64>();
    let mut dz = vec![0.0; cp * t];
    for k in 0..cp {
        let pw = b.proj_w.data()[k];
        let z = &cache.attended[k * t..(k + 1) * t];
        grad.proj_w.data_mut()[k] += z.iter().zip(dy).map(|(a, g)| a * g).sum::<f64>();
        for (d, g) in dz[k * t..(k + 1) * t].iter_mut().zip(dy) {
            *d = pw * g;
        }
    }
    let de = attention_backward(&cache.embedded, &b.attn, &cache.attn, &dz, &mut grad.attn);
    let ce = b.embed_channels();
    let mut dx = vec![0.0; t];
    for ch in 0..ce {
        let w = b.embed_w.data()[ch];
        let dech = &de[ch * t..(ch + 1) * t];
        grad.embed_w.data_mut()[ch] += dech.iter().zip(&cache.raw).map(|(a, x)| a * x).sum::<f64>();
        grad.embed_b.data_mut()[ch] += dech.iter().sum::<f64>();
        for (d, g) in dx.iter_mut().zip(dech) {
            *d += w * g;
        }
    }
    dx
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Side {
    Support,
    Query,
}

/// Forward state of one branch over all slices of a volume.
struct BranchPass {
    side: Side,
    caches: Vec<SliceCache>,
}

fn branch_forward(volume: &Volume, b: &DdtBranch, side: Side, out: &mut [f64]) -> BranchPass {
    let [hq, wq, hs, ws] = volume.dims();
    let nq = hq * wq;
    let ns = hs * ws;
    let src = volume.channel(0);
    let mut caches = Vec::new();
    match side {
        Side::Support => {
            for q in 0..nq {
                let raw = src[q * ns..(q + 1) * ns].to_vec();
                let (y, cache) = slice_forward(raw, hs, ws, b);
                for (o, v) in out[q * ns..(q + 1) * ns].iter_mut().zip(&y) {
                    *o += v;
                }
                caches.push(cache);
            }
        }
        Side::Query => {
            for s in 0..ns {
                let raw: Vec<f64> = (0..nq).map(|q| src[q * ns + s]).collect();
                let (y, cache) = slice_forward(raw, hq, wq, b);
                for (q, v) in y.iter().enumerate() {
                    out[q * ns + s] += v;
                }
                caches.push(cache);
            }
        }
    }
    BranchPass { side, caches }
}

fn branch_backward(pass: &BranchPass, dims: [usize; 4], b: &DdtBranch, dout: &[f64], din: &mut [f64], grad: &mut DdtBranch) {
    let [hq, wq, hs, ws] = dims;
    let nq = hq * wq;
    let ns = hs * ws;
    match pass.side {
        Side::Support => {
            for (q, cache) in pass.caches.iter().enumerate() {
                let dx = slice_backward(cache, b, &dout[q * ns..(q + 1) * ns], grad);
                for (d, v) in din[q * ns..(q + 1) * ns].iter_mut().zip(dx) {
                    *d += v;
                }
            }
        }
        Side::Query => {
            for (s, cache) in pass.caches.iter().enumerate() {
                let dy: Vec<f64> = (0..nq).map(|q| dout[q * ns + s]).collect();
                let dx = slice_backward(cache, b, &dy, grad);
                for (q, v) in dx.into_iter().enumerate() {
                    din[q * ns + s] += v;
                }
            }
        }
    }
}

fn check(volume: &Volume, sdt: &DdtBranch, qdt: &DdtBranch) -> Result<()> {
    if volume.channels() != 1 {
        return Err(DacmError::dim(format!(
            "DDT expects a single-channel volume, got {}",
            volume.channels()
        )));
    }
    if volume.data().is_empty() {
        return Err(DacmError::dim("empty volume"));
    }
    sdt.validate()?;
    qdt.validate()
}

/// Recorded forward pass, reusable for the reverse pass.
pub struct DdtPass {
    dims: [usize; 4],
    sdt: BranchPass,
    qdt: BranchPass,
    output: Volume,
}

impl DdtPass {
    pub fn run(volume: &Volume, sdt: &DdtBranch, qdt: &DdtBranch) -> Result<Self> {
        check(volume, sdt, qdt)?;
        let mut out = vec![0.0; volume.channel_len()];
        let s = branch_forward(volume, sdt, Side::Support, &mut out);
        let q = branch_forward(volume, qdt, Side::Query, &mut out);
        Ok(DdtPass {
            dims: volume.dims(),
            sdt: s,
            qdt: q,
            output: Volume::new(1, volume.dims(), out)?,
        })
    }

    pub fn output(&self) -> &Volume {
        &self.output
    }

    pub fn into_output(self) -> Volume {
        self.output
    }

    /// Returns `∂L/∂volume` and accumulates branch gradients.
    pub fn backward(
        &self,
        sdt: &DdtBranch,
        qdt: &DdtBranch,
        upstream: &Volume,
        grad_sdt: &mut DdtBranch,
        grad_qdt: &mut DdtBranch,
    ) -> Result<Volume> {
        if upstream.dims() != self.dims || upstream.channels() != 1 {
            return Err(DacmError::dim("upstream does not match DDT output"));
        }
        let mut din = vec![0.0; upstream.channel_len()];
        branch_backward(&self.sdt, self.dims, sdt, upstream.data(), &mut din, grad_sdt);
        branch_backward(&self.qdt, self.dims, qdt, upstream.data(), &mut din, grad_qdt);
        Volume::new(1, self.dims, din)
    }
}

/// `SDT(C) + QDT(C)`; the output has the input's shape.
pub fn ddt_forward(volume: &Volume, sdt: &DdtBranch, qdt: &DdtBranch) -> Result<Volume> {
    Ok(DdtPass::run(volume, sdt, qdt)?.into_output())
}

/// Output of one branch alone.
pub fn ddt_branch_forward(volume: &Volume, branch: &DdtBranch, support_side: bool) -> Result<Volume> {
    check(volume, branch, branch)?;
    let mut out = vec![0.0; volume.channel_len()];
    let side = if support_side { Side::Support } else { Side::Query };
    branch_forward(volume, branch, side, &mut out);
    Volume::new(1, volume.dims(), out)
}

/// Gradients of `Σ upstream ⊙ ddt_forward(volume)`.
pub fn ddt_backward(volume: &Volume, params: &DdtParams, upstream: &Volume) -> Result<(Volume, DdtParams)> {
    let pass = DdtPass::run(volume, &params.sdt, &params.qdt)?;
    let mut grad = zeros_like(params);
    let din = pass.backward(&params.sdt, &params.qdt, upstream, &mut grad.sdt, &mut grad.qdt)?;
    Ok((din, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> DdtConfig {
        DdtConfig {
            embed_channels: 3,
            heads: 2,
            head_dim: 2,
            offset_hidden: 3,
            max_offset: 0.5,
        }
    }

    fn volume(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Volume {
        let n = dims.iter().product();
        Volume::new(1, dims, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn shape_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = DdtParams::random(&small_cfg(), 1.0, 1.0, &mut rng);
        let v = volume(&mut rng, [2, 3, 3, 2]);
        let out = ddt_forward(&v, &p.sdt, &p.qdt).unwrap();
        assert_eq!(out.dims(), v.dims());
        assert_eq!(out.channels(), 1);
    }

    #[test]
    fn zero_query_branch_leaves_support_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = DdtParams::random(&small_cfg(), 1.0, 1.0, &mut rng);
        p.qdt.zero_();
        let v = volume(&mut rng, [2, 2, 3, 3]);
        let out = ddt_forward(&v, &p.sdt, &p.qdt).unwrap();
        let sdt = ddt_branch_forward(&v, &p.sdt, true).unwrap();
        assert_eq!(out.data(), sdt.data());
    }

    #[test]
    fn rejects_multichannel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = DdtParams::random(&small_cfg(), 1.0, 1.0, &mut rng);
        let v = Volume::zeros(2, [2, 2, 2, 2]);
        assert!(ddt_forward(&v, &p.sdt, &p.qdt).is_err());
    }
}
