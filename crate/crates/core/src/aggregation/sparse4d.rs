//! Weight-sparsified 4D convolution: only the paths through the centre of
//! either the query or the support 2D window are kept, so the 4D kernel
//! reduces to one 2D kernel over support slices (query position fixed) plus
//! one over query slices (support position fixed).

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::Parameterized;
use super::volume::Volume;
use crate::error::{DacmError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Sparse4dConvParams {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    /// `[c_out, c_in, k, k]` applied over support positions
    pub support_weight: Tensor,
    /// `[c_out, c_in, k, k]` applied over query positions
    pub query_weight: Tensor,
    /// `[c_out]`
    pub bias: Tensor,
}

impl Sparse4dConvParams {
    pub fn zeros(c_in: usize, c_out: usize, kernel: usize) -> Self {
        Sparse4dConvParams {
            c_in,
            c_out,
            kernel,
            support_weight: Tensor::zeros(&[c_out, c_in, kernel, kernel]),
            query_weight: Tensor::zeros(&[c_out, c_in, kernel, kernel]),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn random<R: Rng + ?Sized>(c_in: usize, c_out: usize, kernel: usize, gain: f64, rng: &mut R) -> Self {
        let mut p = Sparse4dConvParams::zeros(c_in, c_out, kernel);
        let std = gain / ((2 * c_in * kernel * kernel) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        for t in [&mut p.support_weight, &mut p.query_weight] {
            for v in t.data_mut() {
                *v = normal.sample(rng);
            }
        }
        p
    }

    fn validate(&self, input: &Volume) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(DacmError::dim("sparse 4D convolution needs an odd kernel size"));
        }
        if input.channels() != self.c_in {
            return Err(DacmError::dim(format!(
                "volume has {} channels, convolution expects {}",
                input.channels(),
                self.c_in
            )));
        }
        if self.support_weight.data().iter().chain(self.query_weight.data()).any(|v| !v.is_finite()) {
            return Err(DacmError::Numerical("non-finite 4D convolution weight".into()));
        }
        Ok(())
    }
}

impl Parameterized for Sparse4dConvParams {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("support_weight".into(), &self.support_weight),
            ("query_weight".into(), &self.query_weight),
            ("bias".into(), &self.bias),
        ]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("support_weight".into(), &mut self.support_weight),
            ("query_weight".into(), &mut self.query_weight),
            ("bias".into(), &mut self.bias),
        ]
    }
}

/// Window offsets `(di, dj, flat kernel index)` together with valid ranges.
fn taps(k: usize) -> Vec<(isize, isize, usize)> {
    let r = (k / 2) as isize;
    let mut v = Vec::with_capacity(k * k);
    for a in 0..k {
        for b in 0..k {
            v.push((a as isize - r, b as isize - r, a * k + b));
        }
    }
    v
}

#[inline]
fn shifted(i: usize, d: isize, n: usize) -> Option<usize> {
    let s = i as isize + d;
    (s >= 0 && s < n as isize).then_some(s as usize)
}

pub fn sparse_conv4d(input: &Volume, params: &Sparse4dConvParams) -> Result<Volume> {
    params.validate(input)?;
    let [hq, wq, hs, ws] = input.dims();
    let nq = hq * wq;
    let ns = hs * ws;
    let k = params.kernel;
    let kk = k * k;
    let taps = taps(k);
    let mut out = Volume::zeros(params.c_out, input.dims());
    let sw = params.support_weight.data();
    let qw = params.query_weight.data();
    let len = nq * ns;
    for o in 0..params.c_out {
        let dst = &mut out.data_mut()[o * len..(o + 1) * len];
        dst.iter_mut().for_each(|v| *v = params.bias.data()[o]);
        for c in 0..params.c_in {
            let src = input.channel(c);
            let wbase = (o * params.c_in + c) * kk;
            // support-slice convolution
            for q in 0..nq {
                let srow = &src[q * ns..(q + 1) * ns];
                let drow = &mut dst[q * ns..(q + 1) * ns];
                for &(di, dj, t) in &taps {
                    let wv = sw[wbase + t];
                    if wv == 0.0 {
                        continue;
                    }
                    for si in 0..hs {
                        let Some(ti) = shifted(si, di, hs) else { continue };
                        for sj in 0..ws {
                            if let Some(tj) = shifted(sj, dj, ws) {
                                drow[si * ws + sj] += wv * srow[ti * ws + tj];
                            }
                        }
                    }
                }
            }
            // query-slice convolution
            for &(di, dj, t) in &taps {
                let wv = qw[wbase + t];
                if wv == 0.0 {
                    continue;
                }
                for qi in 0..hq {
                    let Some(ti) = shifted(qi, di, hq) else { continue };
                    for qj in 0..wq {
                        let Some(tj) = shifted(qj, dj, wq) else { continue };
                        let qs = ti * wq + tj;
                        let qd = qi * wq + qj;
                        let srow = &src[qs * ns..(qs + 1) * ns];
                        let drow = &mut dst[qd * ns..(qd + 1) * ns];
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `Σ upstream ⊙ sparse_conv4d(input)`.
pub fn sparse_conv4d_backward(
    input: &Volume,
    params: &Sparse4dConvParams,
    upstream: &Volume,
) -> Result<(Volume, Sparse4dConvParams)> {
    params.validate(input)?;
    if upstream.channels() != params.c_out || upstream.dims() != input.dims() {
        return Err(DacmError::dim("upstream does not match sparse 4D convolution output"));
    }
    let [hq, wq, hs, ws] = input.dims();
    let nq = hq * wq;
    let ns = hs * ws;
    let k = params.kernel;
    let kk = k * k;
    let taps = taps(k);
    let len = nq * ns;
    let mut grad = Sparse4dConvParams::zeros(params.c_in, params.c_out, k);
    let mut dinput = Volume::zeros(params.c_in, input.dims());
    let sw = params.support_weight.data();
    let qw = params.query_weight.data();
    for o in 0..params.c_out {
        let g = &upstream.data()[o * len..(o + 1) * len];
        grad.bias.data_mut()[o] = g.iter().sum();
        for c in 0..params.c_in {
            let src = input.channel(c);
            let wbase = (o * params.c_in + c) * kk;
            for &(di, dj, t) in &taps {
                let swv = sw[wbase + t];
                let qwv = qw[wbase + t];
                let mut acc_s = 0.0;
                let mut acc_q = 0.0;
                {
                    let dsrc = &mut dinput.data_mut()[c * len..(c + 1) * len];
                    for q in 0..nq {
                        for si in 0..hs {
                            let Some(ti) = shifted(si, di, hs) else { continue };
                            for sj in 0..ws {
                                if let Some(tj) = shifted(sj, dj, ws) {
                                    let go = g[q * ns + si * ws + sj];
                                    acc_s += go * src[q * ns + ti * ws + tj];
                                    dsrc[q * ns + ti * ws + tj] += swv * go;
                                }
                            }
                        }
                    }
                    for qi in 0..hq {
                        let Some(ti) = shifted(qi, di, hq) else { continue };
                        for qj in 0..wq {
                            let Some(tj) = shifted(qj, dj, wq) else { continue };
                            let qs = ti * wq + tj;
                            let qd = qi * wq + qj;
                            let grow = &g[qd * ns..(qd + 1) * ns];
                            let srow = &src[qs * ns..(qs + 1) * ns];
                            let drow = &mut dsrc[qs * ns..(qs + 1) * ns];
                            for s in 0..ns {
                                acc_q += grow[s] * srow[s];
                                drow[s] += qwv * grow[s];
                            }
                        }
                    }
                }
                grad.support_weight.data_mut()[wbase + t] += acc_s;
                grad.query_weight.data_mut()[wbase + t] += acc_q;
            }
        }
    }
    Ok((dinput, grad))
}
