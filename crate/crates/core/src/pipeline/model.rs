//! Per-level volume encoders and the full segmentation model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::backbone::LEVELS;
use super::decoder::{decode_backward, decode_with_cache, Decoder, DecoderCache};
use crate::aggregation::{
    accumulate, prefixed, prefixed_mut, sparse_conv4d, sparse_conv4d_backward, DdtParams, DdtPass, Parameterized,
    Sparse4dConvParams, Volume,
};
use crate::config::RunConfig;
use crate::cost_volume::CostVolume;
use crate::error::{DacmError, Result};
use crate::kernels::{KernelHyperparams, KernelKind};
use crate::tensor::Tensor;

/// `tanh(conv(tanh(conv(C))))` followed by residual DDT layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelEncoder {
    pub conv_in: Sparse4dConvParams,
    pub conv_out: Sparse4dConvParams,
    pub ddt: Vec<DdtParams>,
}

impl LevelEncoder {
    pub fn new<R: Rng + ?Sized>(cfg: &RunConfig, rng: &mut R) -> Self {
        let k = cfg.conv_kernel;
        let mid = cfg.conv_channels;
        let conv_in = Sparse4dConvParams::random(1, mid, k, 1.0, rng);
        let mut conv_out = Sparse4dConvParams::random(mid, 1, k, 1.0, rng);
        conv_out.bias.data_mut()[0] = 0.0;
        let ddt = (0..cfg.ddt_layers)
            .map(|_| DdtParams::random(&cfg.ddt(), 0.0, 0.0, rng))
            .collect();
        LevelEncoder { conv_in, conv_out, ddt }
    }
}

impl Parameterized for LevelEncoder {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("conv_in", self.conv_in.named_params());
        v.extend(prefixed("conv_out", self.conv_out.named_params()));
        for (i, d) in self.ddt.iter().enumerate() {
            v.extend(prefixed(&format!("ddt{i}"), d.named_params()));
        }
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed_mut("conv_in", self.conv_in.named_params_mut());
        v.extend(prefixed_mut("conv_out", self.conv_out.named_params_mut()));
        for (i, d) in self.ddt.iter_mut().enumerate() {
            v.extend(prefixed_mut(&format!("ddt{i}"), d.named_params_mut()));
        }
        v
    }
}

pub struct EncoderCache {
    input: Volume,
    h1: Volume,
    h2: Volume,
    ddt: Vec<(Volume, DdtPass)>,
}

pub fn encode_level(enc: &LevelEncoder, volume: &Volume) -> Result<(Volume, EncoderCache)> {
    let h1 = sparse_conv4d(volume, &enc.conv_in)?.map(f64::tanh);
    let h2 = sparse_conv4d(&h1, &enc.conv_out)?.map(f64::tanh);
    let mut x = h2.clone();
    let mut passes = Vec::with_capacity(enc.ddt.len());
    for layer in &enc.ddt {
        let pass = DdtPass::run(&x, &layer.sdt, &layer.qdt)?;
        let mut next = x.clone();
        for (a, b) in next.data_mut().iter_mut().zip(pass.output().data()) {
            *a += b;
        }
        passes.push((x, pass));
        x = next;
    }
    Ok((
        x,
        EncoderCache {
            input: volume.clone(),
            h1,
            h2,
            ddt: passes,
        },
    ))
}

/// Accumulates into `grad`; the input cotangent is not needed upstream.
pub fn encode_level_backward(
    enc: &LevelEncoder,
    cache: &EncoderCache,
    upstream: &Volume,
    grad: &mut LevelEncoder,
) -> Result<Volume> {
    let mut dx = upstream.clone();
    for (i, (_, pass)) in cache.ddt.iter().enumerate().rev() {
        let layer = &enc.ddt[i];
        let g = &mut grad.ddt[i];
        let din = pass.backward(&layer.sdt, &layer.qdt, &dx, &mut g.sdt, &mut g.qdt)?;
        for (a, b) in dx.data_mut().iter_mut().zip(din.data()) {
            *a += b;
        }
    }
    let mut d2 = dx;
    for (g, h) in d2.data_mut().iter_mut().zip(cache.h2.data()) {
        *g *= 1.0 - h * h;
    }
    let (mut d1, g_out) = sparse_conv4d_backward(&cache.h1, &enc.conv_out, &d2)?;
    accumulate(&mut grad.conv_out, &g_out);
    for (g, h) in d1.data_mut().iter_mut().zip(cache.h1.data()) {
        *g *= 1.0 - h * h;
    }
    let (d0, g_in) = sparse_conv4d_backward(&cache.input, &enc.conv_in, &d1)?;
    accumulate(&mut grad.conv_in, &g_in);
    Ok(d0)
}

/// Trainable aggregation weights: one encoder per level plus the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationNet {
    pub encoders: Vec<LevelEncoder>,
    pub decoder: Decoder,
}

impl Parameterized for AggregationNet {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (l, e) in self.encoders.iter().enumerate() {
            v.extend(prefixed(&format!("level{l}"), e.named_params()));
        }
        v.extend(prefixed("decoder", self.decoder.named_params()));
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = Vec::new();
        for (l, e) in self.encoders.iter_mut().enumerate() {
            v.extend(prefixed_mut(&format!("level{l}"), e.named_params_mut()));
        }
        v.extend(prefixed_mut("decoder", self.decoder.named_params_mut()));
        v
    }
}

pub struct ForwardCache {
    encoders: Vec<EncoderCache>,
    decoder: DecoderCache,
}

impl AggregationNet {
    pub fn new(cfg: &RunConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoders = (0..LEVELS).map(|_| LevelEncoder::new(cfg, &mut rng)).collect();
        let decoder = Decoder::new(LEVELS, cfg.decoder_hidden, cfg.image_size, &mut rng);
        AggregationNet { encoders, decoder }
    }

    /// Logits for pooled per-level cost volumes.
    pub fn forward(&self, volumes: &[Volume]) -> Result<(Tensor, ForwardCache)> {
        if volumes.len() != self.encoders.len() {
            return Err(DacmError::dim(format!(
                "{} volumes for {} encoders",
                volumes.len(),
                self.encoders.len()
            )));
        }
        let mut encoded = Vec::with_capacity(volumes.len());
        let mut caches = Vec::with_capacity(volumes.len());
        for (enc, v) in self.encoders.iter().zip(volumes) {
            let (out, cache) = encode_level(enc, v)?;
            encoded.push(out);
            caches.push(cache);
        }
        let (logits, dcache) = decode_with_cache(&self.decoder, &encoded)?;
        Ok((
            logits,
            ForwardCache {
                encoders: caches,
                decoder: dcache,
            },
        ))
    }

    /// Gradient of `Σ dlogits ⊙ logits` with respect to every weight, plus
    /// the cotangent of each input volume.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Tensor) -> Result<(AggregationNet, Vec<Volume>)> {
        let mut grad = crate::aggregation::zeros_like(self);
        let dvols = decode_backward(&self.decoder, &cache.decoder, dlogits, &mut grad.decoder)?;
        let mut dins = Vec::with_capacity(dvols.len());
        for (l, dv) in dvols.iter().enumerate() {
            dins.push(encode_level_backward(
                &self.encoders[l],
                &cache.encoders[l],
                dv,
                &mut grad.encoders[l],
            )?);
        }
        Ok((grad, dins))
    }
}

/// Mean two-class cross-entropy over pixels and its gradient w.r.t. logits.
pub fn cross_entropy(logits: &Tensor, target: &crate::cost_volume::Mask) -> Result<(f64, Tensor)> {
    let s = logits.shape();
    if s.len() != 3 || s[0] != 2 || s[1] != target.height() || s[2] != target.width() {
        return Err(DacmError::dim(format!(
            "logits {:?} vs mask {}x{}",
            s,
            target.height(),
            target.width()
        )));
    }
    let hw = s[1] * s[2];
    let z = logits.data();
    let mut grad = vec![0.0; 2 * hw];
    let mut loss = 0.0;
    for (p, &fg) in target.data().iter().enumerate() {
        let (a, b) = (z[p], z[hw + p]);
        let m = a.max(b);
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        let (pa, pb) = ((a - lse).exp(), (b - lse).exp());
        let (ta, tb) = if fg { (0.0, 1.0) } else { (1.0, 0.0) };
        loss -= if fg { b - lse } else { a - lse };
        grad[p] = (pa - ta) / hw as f64;
        grad[hw + p] = (pb - tb) / hw as f64;
    }
    Ok((loss / hw as f64, Tensor::from_vec(s, grad)?))
}

/// Foreground prediction: channel 1 beats channel 0.
pub fn predict_mask(logits: &Tensor) -> crate::cost_volume::Mask {
    let s = logits.shape();
    let hw = s[1] * s[2];
    let z = logits.data();
    let data = (0..hw).map(|p| z[hw + p] > z[p]).collect();
    crate::cost_volume::Mask::new(s[1], s[2], data).expect("logit grid shape")
}

/// Kernel hyperparameters per level plus the aggregation network.
#[derive(Debug, Clone, PartialEq)]
pub struct DacmModel {
    pub kind: KernelKind,
    pub kernels: Vec<KernelHyperparams>,
    pub net: AggregationNet,
}

impl DacmModel {
    pub fn new(cfg: &RunConfig) -> Self {
        let kernels = cfg
            .channels
            .iter()
            .map(|&c| {
                if cfg.shared_lengthscale {
                    KernelHyperparams::new_shared()
                } else {
                    KernelHyperparams::new(c)
                }
            })
            .collect();
        DacmModel {
            kind: cfg.kernel,
            kernels,
            net: AggregationNet::new(cfg, super::episode::derive_seed(cfg.seed, 3, 0)),
        }
    }
}

/// Average-pools a level volume so the query grid is at most `query_max`
/// and the support grid at most `support_max` per side.
pub fn pool_volume(c: &CostVolume, query_max: usize, support_max: usize) -> Volume {
    let [hq, _, hs, _] = c.dims();
    let fq = hq.div_ceil(query_max).max(1);
    let fs = hs.div_ceil(support_max).max(1);
    Volume::from(c.avg_pool(fq, fs))
}
