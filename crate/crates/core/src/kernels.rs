//! Covariance kernels (linear, ARD squared exponential and their sum), Gram
//! matrices, and analytic gradients with respect to log-domain
//! hyperparameters.
//!
//! Hyperparameters live in the log domain and are exponentiated at
//! evaluation time, so unconstrained gradient steps keep every scale
//! strictly positive.
//!
//! The flat parameter vector used by [`KernelHyperparams::to_vec`] and by all
//! gradient routines is ordered
//! `[log σ₀², log l_1 .. log l_L, log σ², log v]`, where `L` is `D` for ARD
//! lengthscales and `1` when a single shared lengthscale is used.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{DacmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelKind {
    /// `v · x1ᵀx2`
    Linear,
    /// `σ₀² exp(-½ Σ_d (x1_d - x2_d)² / l_d²)`
    RbfArd,
    /// `Linear + RbfArd`
    Additive,
}

impl KernelKind {
    pub fn uses_rbf(self) -> bool {
        matches!(self, KernelKind::RbfArd | KernelKind::Additive)
    }

    pub fn uses_linear(self) -> bool {
        matches!(self, KernelKind::Linear | KernelKind::Additive)
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            KernelKind::Linear => "linear",
            KernelKind::RbfArd => "rbf",
            KernelKind::Additive => "additive",
        };
        f.write_str(s)
    }
}

impl FromStr for KernelKind {
    type Err = DacmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(KernelKind::Linear),
            "rbf" | "rbf_ard" | "rbfard" => Ok(KernelKind::RbfArd),
            "additive" => Ok(KernelKind::Additive),
            other => Err(DacmError::Config(format!("unknown kernel kind `{other}`"))),
        }
    }
}

/// Learnable kernel and noise parameters, all stored as logarithms.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelHyperparams {
    pub log_output_scale: f64,
    pub log_lengthscales: Vec<f64>,
    pub log_noise: f64,
    pub log_linear_variance: f64,
    /// When set, `log_lengthscales` holds one value applied to every dimension.
    pub shared_lengthscale: bool,
}

impl KernelHyperparams {
    /// Unit-scale initialisation: σ₀² = 1, l_d = 1, σ² = 0.1, v = 1.
    pub fn new(dim: usize) -> Self {
        KernelHyperparams {
            log_output_scale: 0.0,
            log_lengthscales: vec![0.0; dim],
            log_noise: 0.1f64.ln(),
            log_linear_variance: 0.0,
            shared_lengthscale: false,
        }
    }

    /// Same initialisation with one lengthscale shared across all dimensions.
    pub fn new_shared() -> Self {
        KernelHyperparams {
            log_lengthscales: vec![0.0],
            shared_lengthscale: true,
            ..KernelHyperparams::new(0)
        }
    }

    pub fn output_scale(&self) -> f64 {
        self.log_output_scale.exp()
    }

    pub fn noise(&self) -> f64 {
        self.log_noise.exp()
    }

    pub fn linear_variance(&self) -> f64 {
        self.log_linear_variance.exp()
    }

    pub fn lengthscale(&self, d: usize) -> f64 {
        if self.shared_lengthscale {
            self.log_lengthscales[0].exp()
        } else {
            self.log_lengthscales[d].exp()
        }
    }

    pub fn num_params(&self) -> usize {
        3 + self.log_lengthscales.len()
    }

    pub fn idx_output_scale(&self) -> usize {
        0
    }

    pub fn idx_lengthscale(&self, i: usize) -> usize {
        1 + i
    }

    pub fn idx_noise(&self) -> usize {
        1 + self.log_lengthscales.len()
    }

    pub fn idx_linear_variance(&self) -> usize {
        2 + self.log_lengthscales.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.push(self.log_output_scale);
        v.extend_from_slice(&self.log_lengthscales);
        v.push(self.log_noise);
        v.push(self.log_linear_variance);
        v
    }

    pub fn set_from_slice(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(DacmError::dim(format!(
                "expected {} hyperparameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let nl = self.log_lengthscales.len();
        self.log_output_scale = flat[0];
        self.log_lengthscales.copy_from_slice(&flat[1..1 + nl]);
        self.log_noise = flat[1 + nl];
        self.log_linear_variance = flat[2 + nl];
        Ok(())
    }

    /// Checks the lengthscale count against the data dimension and that every
    /// exponentiated value is a positive finite number.
    pub fn check(&self, dim: usize) -> Result<()> {
        let expected = if self.shared_lengthscale { 1 } else { dim };
        if self.log_lengthscales.len() != expected {
            return Err(DacmError::dim(format!(
                "kernel has {} lengthscales, data dimension is {}",
                self.log_lengthscales.len(),
                dim
            )));
        }
        let all = self.to_vec();
        if all.iter().any(|p| {
            let e = p.exp();
            !(e.is_finite() && e > 0.0)
        }) {
            return Err(DacmError::Numerical(
                "kernel hyperparameter overflowed or underflowed".into(),
            ));
        }
        Ok(())
    }
}

/// Exponentiated parameters ready for repeated evaluation.
#[derive(Debug, Clone)]
pub(crate) struct PreparedKernel {
    kind: KernelKind,
    output_scale: f64,
    inv_sq_lengthscales: Vec<f64>,
    linear_variance: f64,
}

impl PreparedKernel {
    pub(crate) fn new(kind: KernelKind, params: &KernelHyperparams, dim: usize) -> Result<Self> {
        params.check(dim)?;
        let inv_sq_lengthscales = (0..dim)
            .map(|d| {
                let l = params.lengthscale(d);
                1.0 / (l * l)
            })
            .collect();
        Ok(PreparedKernel {
            kind,
            output_scale: params.output_scale(),
            inv_sq_lengthscales,
            linear_variance: params.linear_variance(),
        })
    }

    #[inline]
    pub(crate) fn rbf(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut r = 0.0;
        for ((x, y), w) in a.iter().zip(b).zip(&self.inv_sq_lengthscales) {
            let d = x - y;
            r += d * d * w;
        }
        self.output_scale * (-0.5 * r).exp()
    }

    #[inline]
    pub(crate) fn linear(&self, a: &[f64], b: &[f64]) -> f64 {
        self.linear_variance * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
    }

    #[inline]
    pub(crate) fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.kind {
            KernelKind::Linear => self.linear(a, b),
            KernelKind::RbfArd => self.rbf(a, b),
            KernelKind::Additive => self.linear(a, b) + self.rbf(a, b),
        }
    }
}

fn check_pair(params: &KernelHyperparams, x1: &[f64], x2: &[f64]) -> Result<()> {
    if x1.len() != x2.len() {
        return Err(DacmError::dim(format!(
            "kernel inputs have lengths {} and {}",
            x1.len(),
            x2.len()
        )));
    }
    params.check(x1.len())
}

/// Evaluates `k(x1, x2)` for the selected kernel.
pub fn eval_kernel(
    kind: KernelKind,
    params: &KernelHyperparams,
    x1: &[f64],
    x2: &[f64],
) -> Result<f64> {
    check_pair(params, x1, x2)?;
    Ok(PreparedKernel::new(kind, params, x1.len())?.eval(x1, x2))
}

/// `K[i][j] = k(X_i, Y_j)` for row-sample matrices `X` (N×D) and `Y` (M×D).
pub fn gram_matrix(
    kind: KernelKind,
    params: &KernelHyperparams,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if x.ncols() != y.ncols() {
        return Err(DacmError::dim(format!(
            "gram inputs have {} and {} columns",
            x.ncols(),
            y.ncols()
        )));
    }
    let dim = x.ncols();
    let kernel = PreparedKernel::new(kind, params, dim)?;
    let xr = rows(x);
    let yr = rows(y);
    Ok(DMatrix::from_fn(x.nrows(), y.nrows(), |i, j| {
        kernel.eval(&xr[i], &yr[j])
    }))
}

pub(crate) fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// Gradient of `k(x1, x2)` with respect to the flat log-domain parameter
/// vector (see the module docs for the ordering). The noise entry is always
/// zero because the noise term is not part of `k`.
pub fn kernel_param_gradients(
    kind: KernelKind,
    params: &KernelHyperparams,
    x1: &[f64],
    x2: &[f64],
) -> Result<Vec<f64>> {
    check_pair(params, x1, x2)?;
    let kernel = PreparedKernel::new(kind, params, x1.len())?;
    let mut grad = vec![0.0; params.num_params()];
    accumulate_param_gradients(&kernel, params, x1, x2, 1.0, &mut grad);
    Ok(grad)
}

/// Adds `weight · ∂k(x1,x2)/∂θ` into `grad`.
pub(crate) fn accumulate_param_gradients(
    kernel: &PreparedKernel,
    params: &KernelHyperparams,
    x1: &[f64],
    x2: &[f64],
    weight: f64,
    grad: &mut [f64],
) {
    if kernel.kind.uses_rbf() {
        let k = kernel.rbf(x1, x2);
        grad[params.idx_output_scale()] += weight * k;
        let wk = weight * k;
        if params.shared_lengthscale {
            let mut r = 0.0;
            for ((a, b), w) in x1.iter().zip(x2).zip(&kernel.inv_sq_lengthscales) {
                let d = a - b;
                r += d * d * w;
            }
            grad[params.idx_lengthscale(0)] += wk * r;
        } else {
            for (i, ((a, b), w)) in x1
                .iter()
                .zip(x2)
                .zip(&kernel.inv_sq_lengthscales)
                .enumerate()
            {
                let d = a - b;
                grad[1 + i] += wk * d * d * w;
            }
        }
    }
    if kernel.kind.uses_linear() {
        grad[params.idx_linear_variance()] += weight * kernel.linear(x1, x2);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rbf_zero_displacement_is_output_scale() {
        let mut p = KernelHyperparams::new(2);
        p.log_lengthscales = vec![0.4, -1.3];
        let k = eval_kernel(KernelKind::RbfArd, &p, &[0.3, 0.7], &[0.3, 0.7]).unwrap();
        assert_eq!(k, 1.0);
    }

    #[test]
    fn linear_orthogonal_is_zero() {
        let p = KernelHyperparams::new(2);
        let k = eval_kernel(KernelKind::Linear, &p, &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(k, 0.0);
    }

    #[test]
    fn rbf_scalar_value() {
        let mut p = KernelHyperparams::new(2);
        p.log_output_scale = 2f64.ln();
        let k = eval_kernel(KernelKind::RbfArd, &p, &[1.0, 0.0], &[0.0, 0.0]).unwrap();
        // 2·exp(-0.5)
        assert!((k - 1.213_061_319_425_267).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = KernelHyperparams::new(2);
        assert!(matches!(
            eval_kernel(KernelKind::RbfArd, &p, &[1.0, 0.0], &[0.0]),
            Err(DacmError::Dimension(_))
        ));
        assert!(matches!(
            eval_kernel(KernelKind::RbfArd, &p, &[1.0, 0.0, 1.0], &[0.0, 0.0, 0.0]),
            Err(DacmError::Dimension(_))
        ));
        let x = DMatrix::zeros(3, 2);
        let y = DMatrix::zeros(3, 1);
        assert!(gram_matrix(KernelKind::Linear, &p, &x, &y).is_err());
    }

    #[test]
    fn single_point_gram() {
        let mut p = KernelHyperparams::new(3);
        p.log_output_scale = 0.7;
        let x = DMatrix::from_row_slice(1, 3, &[0.1, -0.2, 0.5]);
        let g = gram_matrix(KernelKind::RbfArd, &p, &x, &x).unwrap();
        assert_eq!(g.shape(), (1, 1));
        assert!((g[(0, 0)] - 0.7f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn zero_displacement_gradients() {
        let mut p = KernelHyperparams::new(2);
        p.log_output_scale = 0.3;
        let x = [0.2, -0.4];
        let g = kernel_param_gradients(KernelKind::RbfArd, &p, &x, &x).unwrap();
        assert!((g[0] - 0.3f64.exp()).abs() < 1e-15);
        assert_eq!(g[1], 0.0);
        assert_eq!(g[2], 0.0);
        assert_eq!(g[p.idx_noise()], 0.0);
    }

    #[test]
    fn linear_variance_gradient_is_linear_value() {
        let mut p = KernelHyperparams::new(3);
        p.log_linear_variance = -0.4;
        let a = [0.5, 1.0, -2.0];
        let b = [1.5, -0.5, 0.25];
        let g = kernel_param_gradients(KernelKind::Linear, &p, &a, &b).unwrap();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((g[p.idx_linear_variance()] - (-0.4f64).exp() * dot).abs() < 1e-15);
        assert!(g[..p.idx_linear_variance()].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_lengthscale_matches_equal_ard() {
        let mut shared = KernelHyperparams::new_shared();
        shared.log_lengthscales[0] = -0.3;
        let mut ard = KernelHyperparams::new(3);
        ard.log_lengthscales = vec![-0.3; 3];
        let a = [0.1, 0.2, 0.3];
        let b = [-0.3, 0.5, 0.0];
        let ks = eval_kernel(KernelKind::RbfArd, &shared, &a, &b).unwrap();
        let ka = eval_kernel(KernelKind::RbfArd, &ard, &a, &b).unwrap();
        assert!((ks - ka).abs() < 1e-15);
        let gs = kernel_param_gradients(KernelKind::RbfArd, &shared, &a, &b).unwrap();
        let ga = kernel_param_gradients(KernelKind::RbfArd, &ard, &a, &b).unwrap();
        assert!((gs[1] - ga[1..4].iter().sum::<f64>()).abs() < 1e-15);
    }

    #[test]
    fn kind_parses() {
        assert_eq!("RBF".parse::<KernelKind>().unwrap(), KernelKind::RbfArd);
        assert_eq!(KernelKind::Additive.to_string(), "additive");
        assert!("cosine".parse::<KernelKind>().is_err());
    }
}
