//! Independent oracles shared by the integration tests. Nothing here calls
//! into the code under test except for plain data accessors.

#![allow(dead_code)]

use dacm::aggregation::{AttentionParams, Sparse4dConvParams, Volume};
use dacm::cost_volume::FeatureMap;
use dacm::tensor::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| uniform(rng, -1.0, 1.0)).collect()
}

pub fn random_features(rng: &mut impl Rng, level: usize, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::new(level, c, h, w, random_vec(rng, c * h * w)).unwrap()
}

pub const FD_STEP: f64 = 1e-5;

pub fn fd_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + FD_STEP;
            let a = f(&p);
            p[i] = x[i] - FD_STEP;
            let b = f(&p);
            p[i] = x[i];
            (a - b) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − f‖ / max(‖a‖, ‖f‖, 1e-6·max(1, scale))`.
pub fn rel_err(a: &[f64], f: &[f64], scale: f64) -> f64 {
    let d: Vec<f64> = a.iter().zip(f).map(|(x, y)| x - y).collect();
    norm(&d) / norm(a).max(norm(f)).max(1e-6 * scale.abs().max(1.0))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn abs_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x * y).abs()).sum()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// --- kernels ---------------------------------------------------------------

/// Squared-exponential kernel written out directly from its definition.
pub fn se(out_scale: f64, ls: &[f64], x1: &[f64], x2: &[f64]) -> f64 {
    let r2: f64 = x1
        .iter()
        .zip(x2)
        .zip(ls)
        .map(|((a, b), l)| ((a - b) / l).powi(2))
        .sum();
    out_scale * (-0.5 * r2).exp()
}

// --- GP --------------------------------------------------------------------

/// `log N(y | 0, K + σ²I)` through a full LU inverse and determinant.
pub fn dense_mll(k: &DMatrix<f64>, y: &DVector<f64>, noise: f64) -> f64 {
    let n = y.len();
    let a = k + DMatrix::identity(n, n) * noise;
    let det = a.clone().lu().determinant();
    let inv = a.try_inverse().unwrap();
    let quad = (y.transpose() * &inv * y)[(0, 0)];
    -0.5 * det.ln() - 0.5 * quad - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Predictive mean and variance through a full inverse.
pub fn dense_predict(k: &DMatrix<f64>, y: &DVector<f64>, noise: f64, kstar: &DVector<f64>, kss: f64) -> (f64, f64) {
    let n = y.len();
    let inv = (k + DMatrix::identity(n, n) * noise).try_inverse().unwrap();
    let mean = (kstar.transpose() * &inv * y)[(0, 0)];
    let var = kss - (kstar.transpose() * &inv * kstar)[(0, 0)] + noise;
    (mean, var)
}

// --- aggregation -----------------------------------------------------------

/// Textbook multi-head attention with keys and values read at the token
/// positions themselves (no deformation). Output is `c' × T`.
pub fn dense_attention(x: &[f64], c: usize, t: usize, p: &AttentionParams) -> Vec<f64> {
    let cp = p.heads * p.head_dim;
    let proj = |w: &Tensor, b: &Tensor| -> Vec<Vec<f64>> {
        (0..t)
            .map(|tok| {
                (0..cp)
                    .map(|o| b.data()[o] + (0..c).map(|ch| x[ch * t + tok] * w.data()[ch * cp + o]).sum::<f64>())
                    .collect()
            })
            .collect()
    };
    let q = proj(&p.w_q, &p.b_q);
    let k = proj(&p.w_k, &p.b_k);
    let v = proj(&p.w_v, &p.b_v);
    let d = p.head_dim;
    let mut out = vec![0.0; cp * t];
    for h in 0..p.heads {
        let r = h * d..(h + 1) * d;
        for i in 0..t {
            let logits: Vec<f64> = (0..t)
                .map(|j| dot(&q[i][r.clone()], &k[j][r.clone()]) / (d as f64).sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for e in r.clone() {
                out[e * t + i] = (0..t).map(|j| logits[j].exp() / z * v[j][e]).sum();
            }
        }
    }
    out
}

/// Full 4D convolution with zero padding. `w[o][c]` is indexed by
/// `(a, b, a', b')` window offsets over query then support axes.
pub fn dense_conv4d(input: &Volume, c_out: usize, k: usize, w: impl Fn(usize, usize, [usize; 4]) -> f64, bias: &[f64]) -> Vec<f64> {
    let [hq, wq, hs, ws] = input.dims();
    let c_in = input.channels();
    let r = (k / 2) as isize;
    let at = |c: usize, i: isize, j: isize, a: isize, b: isize| -> f64 {
        if i < 0 || j < 0 || a < 0 || b < 0 || i >= hq as isize || j >= wq as isize || a >= hs as isize || b >= ws as isize {
            return 0.0;
        }
        let idx = ((i as usize * wq + j as usize) * hs + a as usize) * ws + b as usize;
        input.channel(c)[idx]
    };
    let mut out = vec![0.0; c_out * hq * wq * hs * ws];
    for o in 0..c_out {
        for i in 0..hq {
            for j in 0..wq {
                for a in 0..hs {
                    for b in 0..ws {
                        let mut s = bias[o];
                        for c in 0..c_in {
                            for t0 in 0..k {
                                for t1 in 0..k {
                                    for t2 in 0..k {
                                        for t3 in 0..k {
                                            let wv = w(o, c, [t0, t1, t2, t3]);
                                            if wv == 0.0 {
                                                continue;
                                            }
                                            s += wv
                                                * at(
                                                    c,
                                                    i as isize + t0 as isize - r,
                                                    j as isize + t1 as isize - r,
                                                    a as isize + t2 as isize - r,
                                                    b as isize + t3 as isize - r,
                                                );
                                        }
                                    }
                                }
                            }
                        }
                        out[(((o * hq + i) * wq + j) * hs + a) * ws + b] = s;
                    }
                }
            }
        }
    }
    out
}

/// Embeds the two sparse kernels in a dense 4D weight: the support kernel on
/// the query-centre plane, the query kernel on the support-centre plane.
pub fn sparse_as_dense(p: &Sparse4dConvParams) -> impl Fn(usize, usize, [usize; 4]) -> f64 + '_ {
    let k = p.kernel;
    let c = k / 2;
    move |o, ci, t: [usize; 4]| {
        let base = (o * p.c_in + ci) * k * k;
        let mut v = 0.0;
        if t[0] == c && t[1] == c {
            v += p.support_weight.data()[base + t[2] * k + t[3]];
        }
        if t[2] == c && t[3] == c {
            v += p.query_weight.data()[base + t[0] * k + t[1]];
        }
        v
    }
}

/// Same-padded 2D convolution, one output pixel at a time.
pub fn naive_conv2d(x: &[f64], c_in: usize, h: usize, w: usize, weight: &Tensor, bias: Option<&[f64]>) -> Vec<f64> {
    let s = weight.shape();
    let (c_out, k) = (s[0], s[2]);
    let r = (k / 2) as isize;
    let mut out = vec![0.0; c_out * h * w];
    for o in 0..c_out {
        for i in 0..h {
            for j in 0..w {
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for c in 0..c_in {
                    for a in 0..k {
                        for b in 0..k {
                            let (si, sj) = (i as isize + a as isize - r, j as isize + b as isize - r);
                            if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                continue;
                            }
                            acc += weight.data()[((o * c_in + c) * k + a) * k + b]
                                * x[c * h * w + si as usize * w + sj as usize];
                        }
                    }
                }
                out[o * h * w + i * w + j] = acc;
            }
        }
    }
    out
}

/// `N` inputs uniform on `[-2, 2]` and targets drawn from a zero-mean GP with
/// a 1-D squared-exponential kernel plus observation noise.
pub fn synthetic_gp_data(seed: u64, n: usize, lengthscale: f64, out_scale: f64, noise: f64) -> (DMatrix<f64>, DVector<f64>) {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng(seed);
    let x: Vec<f64> = (0..n).map(|_| uniform(&mut r, -2.0, 2.0)).collect();
    let k = DMatrix::from_fn(n, n, |i, j| {
        se(out_scale, &[lengthscale], &[x[i]], &[x[j]]) + if i == j { noise } else { 0.0 }
    });
    let l = k.cholesky().expect("SE covariance plus noise is positive definite").l();
    let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut r));
    (DMatrix::from_column_slice(n, 1, &x), l * z)
}

/// Lengthscale on a log grid maximising the dense MLL with the other
/// hyperparameters held at their true values.
pub fn grid_best_lengthscale(x: &DMatrix<f64>, y: &DVector<f64>, out_scale: f64, noise: f64) -> f64 {
    let n = x.nrows();
    let mut best = (f64::NEG_INFINITY, 0.0);
    for i in 0..=200 {
        let l = (0.05f64.ln() + (5.0f64.ln() - 0.05f64.ln()) * i as f64 / 200.0).exp();
        let k = DMatrix::from_fn(n, n, |a, b| se(out_scale, &[l], &[x[(a, 0)]], &[x[(b, 0)]]));
        let v = dense_mll(&k, y, noise);
        if v > best.0 {
            best = (v, l);
        }
    }
    best.1
}
