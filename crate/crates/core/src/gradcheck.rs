//! Central finite-difference checks of every hand-written gradient.
//!
//! Errors are norm-wise per parameter tensor:
//! `‖a − f‖ / max(‖a‖, ‖f‖, 1e-6·max(1, s))` where `a` is the analytic
//! gradient, `f` the numerical one and `s` the magnitude of the probed
//! scalar (for `Σ u·y` probes, `Σ |u·y|`). Roundoff in a central difference
//! grows with `s`, so the floor does too; without it a gradient that is
//! exactly zero (a key bias under softmax) reports noise.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{
    parameter_gradients, zeros_like, AggregationOp, AttentionParams, DdtConfig, DdtParams, Parameterized,
    Sparse4dConvParams, Volume,
};
use crate::config::RunConfig;
use crate::error::{DacmError, Result};
use crate::gp::{marginal_log_likelihood, mll_gradients, GpModel, GpTrainingSet};
use crate::kernels::{eval_kernel, kernel_param_gradients, KernelHyperparams, KernelKind};
use crate::pipeline::{decode_backward, decode_with_cache, encode_level, encode_level_backward, Decoder, LevelEncoder};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-6;

pub const TARGETS: [&str; 4] = ["kernels", "gp", "aggregation", "pipeline"];

pub fn relative_error(analytic: &[f64], numeric: &[f64], scale: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let floor = FLOOR * scale.abs().max(1.0);
    norm(&diff) / norm(analytic).max(norm(numeric)).max(floor)
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + STEP;
            let up = f(&probe);
            probe[i] = x[i] - STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

/// Central differences over every parameter entry, grouped per tensor.
pub fn numeric_param_gradient<P: Parameterized + Clone>(p: &P, mut f: impl FnMut(&P) -> f64) -> Vec<Vec<f64>> {
    let mut probe = p.clone();
    let sizes: Vec<usize> = p.named_params().iter().map(|(_, t)| t.len()).collect();
    let mut out = Vec::with_capacity(sizes.len());
    for (ti, &n) in sizes.iter().enumerate() {
        let mut g = Vec::with_capacity(n);
        for j in 0..n {
            let orig = probe.named_params()[ti].1.data()[j];
            probe.named_params_mut()[ti].1.data_mut()[j] = orig + STEP;
            let up = f(&probe);
            probe.named_params_mut()[ti].1.data_mut()[j] = orig - STEP;
            let down = f(&probe);
            probe.named_params_mut()[ti].1.data_mut()[j] = orig;
            g.push((up - down) / (2.0 * STEP));
        }
        out.push(g);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub op: String,
    pub draws: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub target: String,
    pub lines: Vec<CheckLine>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(CheckLine::passed)
    }

    pub fn max_rel_err(&self, op: &str) -> Option<f64> {
        self.lines.iter().find(|l| l.op == op).map(|l| l.max_rel_err)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("gradcheck {}\n", self.target);
        for l in &self.lines {
            let _ = writeln!(
                s,
                "{:<32} draws {:>3}  max_rel_err {:.3e}  tol {:.0e}  {}",
                l.op,
                l.draws,
                l.max_rel_err,
                l.tolerance,
                if l.passed() { "ok" } else { "FAIL" }
            );
        }
        let _ = writeln!(s, "{}", if self.passed() { "PASS" } else { "FAIL" });
        s
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn random_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| uniform(rng, -1.0, 1.0)).collect()
}

fn randomize<P: Parameterized, R: Rng + ?Sized>(p: &mut P, scale: f64, rng: &mut R) {
    for (_, t) in p.named_params_mut() {
        for v in t.data_mut() {
            *v = scale * uniform(rng, -1.0, 1.0);
        }
    }
}

fn random_hyper<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> KernelHyperparams {
    let mut p = KernelHyperparams::new(dim);
    let flat: Vec<f64> = (0..p.num_params()).map(|_| uniform(rng, -0.7, 0.7)).collect();
    p.set_from_slice(&flat).expect("matching length");
    p
}

fn check_kernels(rng: &mut ChaCha8Rng, draws: usize) -> Result<Vec<CheckLine>> {
    let mut lines = Vec::new();
    for kind in [KernelKind::Linear, KernelKind::RbfArd, KernelKind::Additive] {
        let mut worst: f64 = 0.0;
        for _ in 0..draws {
            let dim = rng.random_range(1..=5);
            let p = random_hyper(dim, rng);
            let x1 = random_vec(rng, dim);
            let x2 = random_vec(rng, dim);
            let analytic = kernel_param_gradients(kind, &p, &x1, &x2)?;
            let numeric = numeric_gradient(&p.to_vec(), |flat| {
                let mut q = p.clone();
                q.set_from_slice(flat).expect("matching length");
                eval_kernel(kind, &q, &x1, &x2).expect("valid kernel")
            });
            let value = eval_kernel(kind, &p, &x1, &x2)?;
            worst = worst.max(relative_error(&analytic, &numeric, value));
        }
        lines.push(CheckLine {
            op: format!("kernel_param_gradients/{kind}"),
            draws,
            max_rel_err: worst,
            tolerance: 1e-6,
        });
    }
    Ok(lines)
}

fn check_gp(rng: &mut ChaCha8Rng, draws: usize) -> Result<Vec<CheckLine>> {
    let mut lines = Vec::new();
    for kind in [KernelKind::RbfArd, KernelKind::Additive] {
        let mut worst: f64 = 0.0;
        for _ in 0..draws {
            let (n, d) = (5, 2);
            let x = DMatrix::from_fn(n, d, |_, _| uniform(rng, -1.0, 1.0));
            let y = DVector::from_fn(n, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
            let data = GpTrainingSet::new(x, y)?;
            let p = random_hyper(d, rng);
            let model = GpModel::new(kind, p.clone(), data.clone())?;
            let analytic = mll_gradients(&model);
            let numeric = numeric_gradient(&p.to_vec(), |flat| {
                let mut q = p.clone();
                q.set_from_slice(flat).expect("matching length");
                marginal_log_likelihood(&GpModel::new(kind, q, data.clone()).expect("factorisable"))
            });
            worst = worst.max(relative_error(&analytic, &numeric, marginal_log_likelihood(&model)));
        }
        lines.push(CheckLine {
            op: format!("mll_gradients/{kind}"),
            draws,
            max_rel_err: worst,
            tolerance: 1e-5,
        });
    }
    Ok(lines)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn abs_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x * y).abs()).sum()
}

/// Max error over the input and every parameter tensor of one op.
fn op_error<P, F>(params: &P, input: &[f64], upstream: &[f64], analytic: (Vec<f64>, Vec<Vec<f64>>), forward: F) -> f64
where
    P: Parameterized + Clone,
    F: Fn(&P, &[f64]) -> Vec<f64>,
{
    let (din, dparams) = analytic;
    let num_in = numeric_gradient(input, |x| dot(upstream, &forward(params, x)));
    let num_p = numeric_param_gradient(params, |p| dot(upstream, &forward(p, input)));
    let value = abs_dot(upstream, &forward(params, input));
    let mut worst = relative_error(&din, &num_in, value);
    for (a, n) in dparams.iter().zip(&num_p) {
        worst = worst.max(relative_error(a, n, value));
    }
    worst
}

fn small_attention(rng: &mut ChaCha8Rng) -> AttentionParams {
    let c = rng.random_range(1..=3);
    let heads = rng.random_range(1..=2);
    let d = rng.random_range(1..=3);
    let mut p = AttentionParams::random(c, heads, d, 3, 1.0, rng);
    randomize(&mut p, 0.8, rng);
    p
}

fn slice_for(p: &AttentionParams, rng: &mut ChaCha8Rng) -> (usize, usize, Vec<f64>) {
    let h = rng.random_range(2..=4);
    let w = rng.random_range(2..=4);
    (h, w, random_vec(rng, p.in_channels * h * w))
}

fn check_aggregation(rng: &mut ChaCha8Rng, draws: usize) -> Result<Vec<CheckLine>> {
    let mut worst = [0.0f64; 4];
    for _ in 0..draws {
        // offset network: only its own weights influence the output
        let p = small_attention(rng);
        let (h, w, x) = slice_for(&p, rng);
        let shape = [p.in_channels, h, w];
        let slice = Tensor::from_vec(&shape, x.clone())?;
        let up = random_vec(rng, p.heads * 2 * h * w);
        let g = parameter_gradients(AggregationOp::OffsetNetwork { slice: &slice, params: &p }, &up)?;
        let num_in = numeric_gradient(&x, |v| {
            let t = Tensor::from_vec(&shape, v.to_vec()).expect("shape");
            dot(&up, &crate::aggregation::offset_network(&t, &p).expect("valid").into_data())
        });
        let value = abs_dot(&up, &crate::aggregation::offset_network(&slice, &p)?.into_data());
        let mut e = relative_error(&g.input, &num_in, value);
        let num_p = numeric_param_gradient(&p.offset, |o| {
            let mut q = p.clone();
            q.offset = o.clone();
            dot(&up, &crate::aggregation::offset_network(&slice, &q).expect("valid").into_data())
        });
        for ((_, a), n) in g.params.iter().zip(&num_p) {
            e = e.max(relative_error(a.data(), n, value));
        }
        worst[0] = worst[0].max(e);

        let p = small_attention(rng);
        let (h, w, x) = slice_for(&p, rng);
        let shape = [p.in_channels, h, w];
        let slice = Tensor::from_vec(&shape, x.clone())?;
        let up = random_vec(rng, p.projected_channels() * h * w);
        let g = parameter_gradients(AggregationOp::DeformableAttention { slice: &slice, params: &p }, &up)?;
        let fwd = |q: &AttentionParams, v: &[f64]| {
            let t = Tensor::from_vec(&shape, v.to_vec()).expect("shape");
            crate::aggregation::deformable_attention_2d(&t, q).expect("valid").into_data()
        };
        let dp = g.params.iter().map(|(_, t)| t.data().to_vec()).collect();
        worst[1] = worst[1].max(op_error(&p, &x, &up, (g.input, dp), fwd));

        let cfg = DdtConfig {
            embed_channels: rng.random_range(1..=3),
            heads: rng.random_range(1..=2),
            head_dim: rng.random_range(1..=2),
            offset_hidden: 2,
            max_offset: 0.5,
        };
        let mut p = DdtParams::random(&cfg, 1.0, 1.0, rng);
        randomize(&mut p, 0.8, rng);
        let dims = [rng.random_range(1..=3), rng.random_range(2..=3), rng.random_range(1..=3), 2];
        let n: usize = dims.iter().product();
        let x = random_vec(rng, n);
        let vol = Volume::new(1, dims, x.clone())?;
        let up = random_vec(rng, n);
        let g = parameter_gradients(AggregationOp::Ddt { volume: &vol, params: &p }, &up)?;
        let fwd = |q: &DdtParams, v: &[f64]| {
            let vol = Volume::new(1, dims, v.to_vec()).expect("shape");
            crate::aggregation::ddt_forward(&vol, &q.sdt, &q.qdt).expect("valid").into_data()
        };
        let dp = g.params.iter().map(|(_, t)| t.data().to_vec()).collect();
        worst[2] = worst[2].max(op_error(&p, &x, &up, (g.input, dp), fwd));

        let (ci, co) = (rng.random_range(1..=2), rng.random_range(1..=2));
        let mut p = Sparse4dConvParams::random(ci, co, 3, 1.0, rng);
        randomize(&mut p, 1.0, rng);
        let dims = [2, rng.random_range(2..=3), 2, rng.random_range(2..=3)];
        let n: usize = dims.iter().product::<usize>();
        let x = random_vec(rng, ci * n);
        let vol = Volume::new(ci, dims, x.clone())?;
        let up = random_vec(rng, co * n);
        let g = parameter_gradients(AggregationOp::SparseConv4d { volume: &vol, params: &p }, &up)?;
        let fwd = |q: &Sparse4dConvParams, v: &[f64]| {
            let vol = Volume::new(ci, dims, v.to_vec()).expect("shape");
            crate::aggregation::sparse_conv4d(&vol, q).expect("valid").into_data()
        };
        let dp = g.params.iter().map(|(_, t)| t.data().to_vec()).collect();
        worst[3] = worst[3].max(op_error(&p, &x, &up, (g.input, dp), fwd));
    }
    let names = ["offset_network", "deformable_attention_2d", "ddt_forward", "sparse_conv4d"];
    Ok(names
        .iter()
        .zip(worst)
        .map(|(op, e)| CheckLine {
            op: op.to_string(),
            draws,
            max_rel_err: e,
            tolerance: 1e-4,
        })
        .collect())
}

fn check_pipeline(rng: &mut ChaCha8Rng, draws: usize) -> Result<Vec<CheckLine>> {
    let mut worst = [0.0f64; 2];
    for _ in 0..draws {
        let hidden = rng.random_range(1..=3);
        let out = rng.random_range(3..=6);
        let mut dec = Decoder::new(3, hidden, out, rng);
        randomize(&mut dec, 0.8, rng);
        let dims = [[4, 4, 2, 2], [2, 2, 2, 1], [3, 3, 1, 2]];
        let inputs: Vec<Vec<f64>> = dims
            .iter()
            .map(|d| random_vec(rng, d.iter().product()))
            .collect();
        let vols = |xs: &[Vec<f64>]| -> Vec<Volume> {
            xs.iter()
                .zip(&dims)
                .map(|(x, &d)| Volume::new(1, d, x.clone()).expect("shape"))
                .collect()
        };
        let up = random_vec(rng, 2 * out * out);
        let (_, cache) = decode_with_cache(&dec, &vols(&inputs))?;
        let mut grad = zeros_like(&dec);
        let upt = Tensor::from_vec(&[2, out, out], up.clone())?;
        let dvols = decode_backward(&dec, &cache, &upt, &mut grad)?;
        let loss = |d: &Decoder, xs: &[Vec<f64>]| {
            dot(&up, decode_with_cache(d, &vols(xs)).expect("valid").0.data())
        };
        let value = abs_dot(&up, decode_with_cache(&dec, &vols(&inputs))?.0.data());
        let mut e: f64 = 0.0;
        for (l, dv) in dvols.iter().enumerate() {
            let num = numeric_gradient(&inputs[l], |x| {
                let mut xs = inputs.clone();
                xs[l] = x.to_vec();
                loss(&dec, &xs)
            });
            e = e.max(relative_error(dv.data(), &num, value));
        }
        let num_p = numeric_param_gradient(&dec, |d| loss(d, &inputs));
        for ((_, a), n) in grad.named_params().iter().zip(&num_p) {
            e = e.max(relative_error(a.data(), n, value));
        }
        worst[0] = worst[0].max(e);

        let cfg = RunConfig {
            heads: 1,
            head_dim: 2,
            embed_channels: 2,
            offset_hidden: 2,
            conv_channels: 2,
            ddt_layers: rng.random_range(1..=2),
            ..RunConfig::default()
        };
        let mut enc = LevelEncoder::new(&cfg, rng);
        randomize(&mut enc, 0.7, rng);
        let d = [2, 3, 2, 2];
        let x = random_vec(rng, 24);
        let up = random_vec(rng, 24);
        let vol = Volume::new(1, d, x.clone())?;
        let (_, cache) = encode_level(&enc, &vol)?;
        let mut grad = zeros_like(&enc);
        let din = encode_level_backward(&enc, &cache, &Volume::new(1, d, up.clone())?, &mut grad)?;
        let fwd = |p: &LevelEncoder, v: &[f64]| {
            encode_level(p, &Volume::new(1, d, v.to_vec()).expect("shape"))
                .expect("valid")
                .0
                .into_data()
        };
        let dp = grad.named_params().iter().map(|(_, t)| t.data().to_vec()).collect();
        worst[1] = worst[1].max(op_error(&enc, &x, &up, (din.into_data(), dp), fwd));
    }
    Ok(vec![
        CheckLine {
            op: "decoder".into(),
            draws,
            max_rel_err: worst[0],
            tolerance: 1e-4,
        },
        CheckLine {
            op: "level_encoder".into(),
            draws,
            max_rel_err: worst[1],
            tolerance: 1e-4,
        },
    ])
}

/// Runs the finite-difference suite of one module.
pub fn run_gradcheck(target: &str, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lines = match target {
        "kernels" => check_kernels(&mut rng, 50)?,
        "gp" => check_gp(&mut rng, 20)?,
        "aggregation" => check_aggregation(&mut rng, 20)?,
        "pipeline" => check_pipeline(&mut rng, 20)?,
        other => {
            return Err(DacmError::Config(format!(
                "unknown gradcheck target {other:?}; expected one of {}",
                TARGETS.join(", ")
            )))
        }
    };
    Ok(GradcheckReport {
        target: target.to_string(),
        lines,
    })
}
