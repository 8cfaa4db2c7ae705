//! Fixed linear feature pyramid.
//!
//! Each level is a grouped 3×3 convolution followed by average pooling.
//! Output channel `o` only reads input channels with the same index modulo
//! 3, so every feature descends from exactly one colour channel. Weights are
//! drawn once from a seed and never trained.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cost_volume::FeatureMap;
use crate::error::{DacmError, Result};
use crate::tensor::Tensor;

pub const LEVELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PyramidConfig {
    pub image_size: usize,
    /// side length per level, strictly decreasing
    pub resolutions: [usize; LEVELS],
    pub channels: [usize; LEVELS],
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            image_size: 32,
            resolutions: [16, 8, 4],
            channels: [8, 16, 32],
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        let mut prev = self.image_size;
        for (l, &r) in self.resolutions.iter().enumerate() {
            if r == 0 || r >= prev || prev % r != 0 {
                return Err(DacmError::Config(format!(
                    "level {l} resolution {r} must strictly divide the previous size {prev}"
                )));
            }
            if self.channels[l] == 0 {
                return Err(DacmError::Config(format!("level {l} has zero channels")));
            }
            prev = r;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: PyramidConfig,
    /// per level `[c_out, c_in, 3, 3]`, zero outside the channel group
    pub weights: Vec<Tensor>,
}

impl Backbone {
    pub fn new(config: PyramidConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(1.0, 0.5).expect("valid std");
        let mut weights = Vec::with_capacity(LEVELS);
        let mut c_in = 3;
        for &c_out in &config.channels {
            let mut w = Tensor::zeros(&[c_out, c_in, 3, 3]);
            let fan_in = 9.0 * (0..c_in).filter(|i| i % 3 == 0).count().max(1) as f64;
            for o in 0..c_out {
                for i in (0..c_in).filter(|i| i % 3 == o % 3) {
                    for t in 0..9 {
                        w.data_mut()[(o * c_in + i) * 9 + t] = normal.sample(&mut rng) / fan_in;
                    }
                }
            }
            weights.push(w);
            c_in = c_out;
        }
        Ok(Backbone { config, weights })
    }
}

fn conv3x3(x: &[f64], c_in: usize, n: usize, w: &Tensor) -> Vec<f64> {
    let c_out = w.shape()[0];
    let hw = n * n;
    let wt = w.data();
    let mut out = vec![0.0; c_out * hw];
    for o in 0..c_out {
        let dst = &mut out[o * hw..(o + 1) * hw];
        for c in 0..c_in {
            let base = (o * c_in + c) * 9;
            if wt[base..base + 9].iter().all(|&v| v == 0.0) {
                continue;
            }
            let src = &x[c * hw..(c + 1) * hw];
            for ki in 0..3 {
                for kj in 0..3 {
                    let wv = wt[base + ki * 3 + kj];
                    for i in 0..n {
                        let si = i as isize + ki as isize - 1;
                        if si < 0 || si >= n as isize {
                            continue;
                        }
                        for j in 0..n {
                            let sj = j as isize + kj as isize - 1;
                            if sj < 0 || sj >= n as isize {
                                continue;
                            }
                            dst[i * n + j] += wv * src[si as usize * n + sj as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn avg_pool(x: &[f64], c: usize, n: usize, f: usize) -> Vec<f64> {
    let m = n / f;
    let norm = (f * f) as f64;
    let mut out = vec![0.0; c * m * m];
    for ch in 0..c {
        for i in 0..m {
            for j in 0..m {
                let mut s = 0.0;
                for a in 0..f {
                    for b in 0..f {
                        s += x[ch * n * n + (i * f + a) * n + j * f + b];
                    }
                }
                out[ch * m * m + i * m + j] = s / norm;
            }
        }
    }
    out
}

/// Three feature maps at the configured resolutions, finest first.
pub fn extract_pyramid(image: &Tensor, backbone: &Backbone) -> Result<Vec<FeatureMap>> {
    let cfg = &backbone.config;
    let n = cfg.image_size;
    if image.shape() != [3, n, n] {
        return Err(DacmError::dim(format!(
            "image shape {:?}, backbone expects [3, {n}, {n}]",
            image.shape()
        )));
    }
    let mut x = image.data().to_vec();
    let mut size = n;
    let mut c_in = 3;
    let mut out = Vec::with_capacity(LEVELS);
    for l in 0..LEVELS {
        let y = conv3x3(&x, c_in, size, &backbone.weights[l]);
        let r = cfg.resolutions[l];
        let pooled = avg_pool(&y, cfg.channels[l], size, size / r);
        out.push(FeatureMap::new(l, cfg.channels[l], r, r, pooled.clone())?);
        x = pooled;
        size = r;
        c_in = cfg.channels[l];
    }
    Ok(out)
}
