//! Exact Gaussian-process regression with a zero-mean prior.
//!
//! A [`GpModel`] always holds a valid Cholesky factorisation of `K + σ²I`;
//! replacing its hyperparameters or data refactorises immediately, so the
//! cached solve can never go stale.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{DacmError, Result};
use crate::kernels::{
    accumulate_param_gradients, rows, KernelHyperparams, KernelKind, PreparedKernel,
};
use crate::optim::{Adam, AdamConfig};

/// Largest training set accepted per model.
pub const MAX_TRAINING_POINTS: usize = 4096;

const JITTER_RETRIES: usize = 3;
const JITTER_BASE: f64 = 1e-8;
const JITTER_GROWTH: f64 = 10.0;

/// Maximum tolerated MLL decrease for an accepted step in [`fit`].
pub const ASCENT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GpTrainingSet {
    x: DMatrix<f64>,
    y: DVector<f64>,
}

impl GpTrainingSet {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(DacmError::dim("training set needs N >= 1 and D >= 1"));
        }
        if x.nrows() != y.len() {
            return Err(DacmError::dim(format!(
                "{} inputs but {} targets",
                x.nrows(),
                y.len()
            )));
        }
        if x.nrows() > MAX_TRAINING_POINTS {
            return Err(DacmError::dim(format!(
                "{} training points exceeds the cap of {MAX_TRAINING_POINTS}",
                x.nrows()
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(DacmError::Numerical("non-finite training data".into()));
        }
        Ok(GpTrainingSet { x, y })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }
}

#[derive(Debug, Clone)]
struct Factorization {
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    log_det: f64,
    jitter: f64,
}

#[derive(Debug, Clone)]
pub struct GpModel {
    kind: KernelKind,
    params: KernelHyperparams,
    data: GpTrainingSet,
    rows: Vec<Vec<f64>>,
    fact: Factorization,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictiveDistribution {
    pub mean: f64,
    pub variance: f64,
}

/// Cholesky with the jitter schedule `1e-8·tr(A)/N`, growing ×10 for up to
/// three retries. Returns the factor and the jitter that was added.
pub fn cholesky_with_jitter(a: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(a.clone()) {
        return Ok((c, 0.0));
    }
    let n = a.nrows().max(1) as f64;
    let mut jitter = JITTER_BASE * a.trace().abs() / n;
    if jitter == 0.0 {
        jitter = JITTER_BASE;
    }
    for _ in 0..JITTER_RETRIES {
        let mut m = a.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(m) {
            log::debug!("cholesky succeeded with jitter {jitter:e}");
            return Ok((c, jitter));
        }
        jitter *= JITTER_GROWTH;
    }
    Err(DacmError::Numerical(format!(
        "Cholesky failed after {JITTER_RETRIES} jitter retries"
    )))
}

impl GpModel {
    pub fn new(kind: KernelKind, params: KernelHyperparams, data: GpTrainingSet) -> Result<Self> {
        params.check(data.dim())?;
        let rows = rows(&data.x);
        let fact = factorize(kind, &params, &rows, &data.y)?;
        Ok(GpModel {
            kind,
            params,
            data,
            rows,
            fact,
        })
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn params(&self) -> &KernelHyperparams {
        &self.params
    }

    pub fn data(&self) -> &GpTrainingSet {
        &self.data
    }

    /// Jitter added to the diagonal by the last factorisation.
    pub fn jitter(&self) -> f64 {
        self.fact.jitter
    }

    pub fn set_params(&mut self, params: KernelHyperparams) -> Result<()> {
        params.check(self.data.dim())?;
        self.fact = factorize(self.kind, &params, &self.rows, &self.data.y)?;
        self.params = params;
        Ok(())
    }

    pub fn set_data(&mut self, data: GpTrainingSet) -> Result<()> {
        self.params.check(data.dim())?;
        let rows = rows(&data.x);
        self.fact = factorize(self.kind, &self.params, &rows, &data.y)?;
        self.rows = rows;
        self.data = data;
        Ok(())
    }

    pub fn into_params(self) -> KernelHyperparams {
        self.params
    }
}

fn covariance(
    kernel: &PreparedKernel,
    rows: &[Vec<f64>],
    noise: f64,
) -> DMatrix<f64> {
    let n = rows.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel.eval(&rows[i], &rows[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] += noise;
    }
    k
}

fn factorize(
    kind: KernelKind,
    params: &KernelHyperparams,
    rows: &[Vec<f64>],
    y: &DVector<f64>,
) -> Result<Factorization> {
    let dim = rows.first().map_or(0, |r| r.len());
    let kernel = PreparedKernel::new(kind, params, dim)?;
    let k = covariance(&kernel, rows, params.noise());
    let (chol, jitter) = cholesky_with_jitter(&k)?;
    let alpha = chol.solve(y);
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    if !log_det.is_finite() || alpha.iter().any(|a| !a.is_finite()) {
        return Err(DacmError::Numerical("non-finite GP factorisation".into()));
    }
    Ok(Factorization {
        chol,
        alpha,
        log_det,
        jitter,
    })
}

/// `log p(y|X) = -½ log|K+σ²I| - ½ yᵀ(K+σ²I)⁻¹y - (N/2) log 2π`.
pub fn marginal_log_likelihood(model: &GpModel) -> f64 {
    let n = model.data.len() as f64;
    -0.5 * model.fact.log_det
        - 0.5 * model.data.y.dot(&model.fact.alpha)
        - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

/// Gradient of the marginal log-likelihood with respect to the flat
/// log-domain hyperparameter vector, via
/// `∂MLL/∂θ = ½ tr((ααᵀ - (K+σ²I)⁻¹) ∂(K+σ²I)/∂θ)`.
pub fn mll_gradients(model: &GpModel) -> Vec<f64> {
    let params = &model.params;
    let n = model.data.len();
    let kernel = PreparedKernel::new(model.kind, params, model.data.dim())
        .expect("hyperparameters validated at construction");
    let inv = model.fact.chol.inverse();
    let alpha = &model.fact.alpha;
    let mut grad = vec![0.0; params.num_params()];
    let mut trace_w = 0.0;
    for i in 0..n {
        for j in 0..=i {
            let w = alpha[i] * alpha[j] - inv[(i, j)];
            if i == j {
                trace_w += w;
                accumulate_param_gradients(
                    &kernel,
                    params,
                    &model.rows[i],
                    &model.rows[j],
                    0.5 * w,
                    &mut grad,
                );
            } else {
                accumulate_param_gradients(
                    &kernel,
                    params,
                    &model.rows[i],
                    &model.rows[j],
                    w,
                    &mut grad,
                );
            }
        }
    }
    grad[params.idx_noise()] = 0.5 * params.noise() * trace_w;
    grad
}

/// Closed-form predictive distribution at `x_star`.
pub fn predict(model: &GpModel, x_star: &[f64]) -> Result<PredictiveDistribution> {
    if x_star.len() != model.data.dim() {
        return Err(DacmError::dim(format!(
            "test point has dimension {}, model has {}",
            x_star.len(),
            model.data.dim()
        )));
    }
    let kernel = PreparedKernel::new(model.kind, &model.params, model.data.dim())?;
    let kvec = DVector::from_iterator(
        model.data.len(),
        model.rows.iter().map(|r| kernel.eval(r, x_star)),
    );
    let k_star = kernel.eval(x_star, x_star);
    let mean = kvec.dot(&model.fact.alpha);
    let v = model
        .fact
        .chol
        .l_dirty()
        .solve_lower_triangular(&kvec)
        .ok_or_else(|| DacmError::Numerical("singular Cholesky factor".into()))?;
    let variance = k_star - v.dot(&v) + model.params.noise();
    if !(mean.is_finite() && variance.is_finite()) {
        return Err(DacmError::Numerical("non-finite prediction".into()));
    }
    Ok(PredictiveDistribution { mean, variance })
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: GpModel,
    /// MLL before the first step followed by the MLL after every step.
    pub trace: Vec<f64>,
}

/// Adam ascent on the marginal log-likelihood.
///
/// Each proposed step is accepted only if it lowers the MLL by no more than
/// [`ASCENT_TOLERANCE`]; otherwise it is halved up to 20 times and, failing
/// that, skipped. The returned trace is therefore non-decreasing up to that
/// tolerance.
pub fn fit(model: GpModel, max_steps: usize, learning_rate: f64) -> Result<FitResult> {
    let mut model = model;
    let mut adam = Adam::new(AdamConfig::with_lr(learning_rate), model.params.num_params());
    let mut current = marginal_log_likelihood(&model);
    let mut trace = Vec::with_capacity(max_steps + 1);
    trace.push(current);
    for _ in 0..max_steps {
        let grad = mll_gradients(&model);
        let step = adam.direction(&grad);
        let base = model.params.to_vec();
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..20 {
            if step.iter().all(|s| s * scale == 0.0) {
                break;
            }
            let proposal: Vec<f64> = base.iter().zip(&step).map(|(p, s)| p + scale * s).collect();
            let mut params = model.params.clone();
            params.set_from_slice(&proposal)?;
            match GpModel::new(model.kind, params, model.data.clone()) {
                Ok(candidate) => {
                    let value = marginal_log_likelihood(&candidate);
                    if value.is_finite() && value >= current - ASCENT_TOLERANCE {
                        model = candidate;
                        current = value;
                        accepted = true;
                        break;
                    }
                }
                Err(DacmError::Numerical(_)) => {}
                Err(e) => return Err(e),
            }
            scale *= 0.5;
        }
        if !accepted {
            log::trace!("GP ascent step rejected");
        }
        trace.push(current);
    }
    Ok(FitResult { model, trace })
}
