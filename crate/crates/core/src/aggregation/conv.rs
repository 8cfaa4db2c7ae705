//! Stride-1 2D convolution with zero "same" padding on channel-major
//! `c × h × w` buffers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::Parameterized;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    /// `[c_out, c_in, k, k]`
    pub weight: Tensor,
    /// `[c_out]`
    pub bias: Tensor,
}

impl Conv2d {
    pub fn zeros(c_in: usize, c_out: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "convolution kernel size must be odd");
        Conv2d {
            c_in,
            c_out,
            kernel,
            weight: Tensor::zeros(&[c_out, c_in, kernel, kernel]),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    /// Gaussian weights with standard deviation `gain / sqrt(fan_in)`, zero bias.
    pub fn random<R: Rng + ?Sized>(c_in: usize, c_out: usize, kernel: usize, gain: f64, rng: &mut R) -> Self {
        let mut conv = Conv2d::zeros(c_in, c_out, kernel);
        let std = gain / ((c_in * kernel * kernel) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        for w in conv.weight.data_mut() {
            *w = normal.sample(rng);
        }
        conv
    }

    pub fn forward(&self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.c_in * h * w);
        let hw = h * w;
        let k = self.kernel;
        let r = (k / 2) as isize;
        let wt = self.weight.data();
        let mut out = vec![0.0; self.c_out * hw];
        for o in 0..self.c_out {
            let dst = &mut out[o * hw..(o + 1) * hw];
            dst.iter_mut().for_each(|v| *v = self.bias.data()[o]);
            for c in 0..self.c_in {
                let src = &x[c * hw..(c + 1) * hw];
                for ki in 0..k {
                    let di = ki as isize - r;
                    for kj in 0..k {
                        let dj = kj as isize - r;
                        let wv = wt[((o * self.c_in + c) * k + ki) * k + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        let (i0, i1) = valid_range(h, di);
                        let (j0, j1) = valid_range(w, dj);
                        for i in i0..i1 {
                            let si = (i as isize + di) as usize;
                            let drow = &mut dst[i * w..(i + 1) * w];
                            let srow = &src[si * w..(si + 1) * w];
                            for j in j0..j1 {
                                drow[j] += wv * srow[(j as isize + dj) as usize];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    pub fn backward(&self, x: &[f64], h: usize, w: usize, dy: &[f64], grad: &mut Conv2d) -> Vec<f64> {
        let hw = h * w;
        let k = self.kernel;
        let r = (k / 2) as isize;
        let wt = self.weight.data();
        let mut dx = vec![0.0; self.c_in * hw];
        for o in 0..self.c_out {
            let g = &dy[o * hw..(o + 1) * hw];
            grad.bias.data_mut()[o] += g.iter().sum::<f64>();
            for c in 0..self.c_in {
                let src = &x[c * hw..(c + 1) * hw];
                for ki in 0..k {
                    let di = ki as isize - r;
                    for kj in 0..k {
                        let dj = kj as isize - r;
                        let widx = ((o * self.c_in + c) * k + ki) * k + kj;
                        let wv = wt[widx];
                        let (i0, i1) = valid_range(h, di);
                        let (j0, j1) = valid_range(w, dj);
                        let mut acc = 0.0;
                        for i in i0..i1 {
                            let si = (i as isize + di) as usize;
                            let grow = &g[i * w..(i + 1) * w];
                            let srow = &src[si * w..(si + 1) * w];
                            let dxrow = &mut dx[c * hw + si * w..c * hw + (si + 1) * w];
                            for j in j0..j1 {
                                let sj = (j as isize + dj) as usize;
                                acc += grow[j] * srow[sj];
                                dxrow[sj] += wv * grow[j];
                            }
                        }
                        grad.weight.data_mut()[widx] += acc;
                    }
                }
            }
        }
        dx
    }
}

/// Output rows `i` for which `i + d` stays inside `0..n`.
#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo.min(n), hi.min(n))
}

impl Parameterized for Conv2d {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }
}

/// Reference convolution by direct summation over the padded window.
#[cfg(test)]
pub(crate) fn naive_conv(conv: &Conv2d, x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = conv.kernel as isize;
    let r = k / 2;
    let mut out = vec![0.0; conv.c_out * h * w];
    for o in 0..conv.c_out {
        for i in 0..h as isize {
            for j in 0..w as isize {
                let mut acc = conv.bias.data()[o];
                for c in 0..conv.c_in {
                    for a in 0..k {
                        for b in 0..k {
                            let (si, sj) = (i + a - r, j + b - r);
                            if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                continue;
                            }
                            let wv = conv.weight.data()[((o * conv.c_in + c) * conv.kernel + a as usize) * conv.kernel + b as usize];
                            acc += wv * x[(c * h + si as usize) * w + sj as usize];
                        }
                    }
                }
                out[(o * h + i as usize) * w + j as usize] = acc;
            }
        }
    }
    out
}
