mod common;

use common::{dense_mll, dense_predict, fd_grad, grid_best_lengthscale, rel_err, synthetic_gp_data};
use dacm::gp::{fit, marginal_log_likelihood, mll_gradients, predict, GpModel, GpTrainingSet};
use dacm::kernels::{eval_kernel, gram_matrix, KernelHyperparams, KernelKind};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn hyper(d: usize, s: f64, ls: Vec<f64>, n: f64, v: f64) -> KernelHyperparams {
    let mut p = KernelHyperparams::new(d);
    p.log_output_scale = s;
    p.log_lengthscales = ls;
    p.log_noise = n;
    p.log_linear_variance = v;
    p
}

fn kind() -> impl Strategy<Value = KernelKind> {
    prop_oneof![Just(KernelKind::Linear), Just(KernelKind::RbfArd), Just(KernelKind::Additive)]
}

/// Small random problems, N ≤ 8.
fn problem() -> impl Strategy<Value = (KernelKind, KernelHyperparams, DMatrix<f64>, DVector<f64>, Vec<f64>)> {
    (kind(), 1usize..=3, 1usize..=8).prop_flat_map(|(k, d, n)| {
        (
            Just(k),
            -0.5f64..0.5,
            prop::collection::vec(-0.7f64..0.7, d),
            -3.0f64..-0.5,
            -0.5f64..0.5,
            prop::collection::vec(-1.0f64..1.0, n * d),
            prop::collection::vec(prop_oneof![Just(-1.0), Just(1.0)], n),
            prop::collection::vec(-1.5f64..1.5, d),
        )
            .prop_map(move |(k, s, ls, noise, v, xs, ys, star)| {
                (
                    k,
                    hyper(d, s, ls, noise, v),
                    DMatrix::from_row_slice(n, d, &xs),
                    DVector::from_vec(ys),
                    star,
                )
            })
    })
}

fn model(k: KernelKind, p: &KernelHyperparams, x: &DMatrix<f64>, y: &DVector<f64>) -> GpModel {
    GpModel::new(k, p.clone(), GpTrainingSet::new(x.clone(), y.clone()).unwrap()).unwrap()
}

#[test]
fn one_by_one_mll() {
    let x = DMatrix::from_row_slice(1, 1, &[0.0]);
    let m = model(KernelKind::RbfArd, &hyper(1, 0.0, vec![0.0], 0.0, 0.0), &x, &DVector::from_vec(vec![0.0]));
    let want = -0.5 * 2f64.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    assert!((marginal_log_likelihood(&m) - want).abs() < 1e-12);
    assert!((want + 1.26551).abs() < 1e-5);
}

#[test]
fn two_point_mll_matches_explicit_formula() {
    let p = hyper(2, 0.2, vec![0.1, -0.3], -1.5, 0.0);
    let x = DMatrix::from_row_slice(2, 2, &[0.1, 0.5, -0.7, 0.2]);
    let y = DVector::from_vec(vec![1.0, -1.0]);
    let m = model(KernelKind::RbfArd, &p, &x, &y);
    let k = gram_matrix(KernelKind::RbfArd, &p, &x, &x).unwrap();
    let (a, b, d) = (k[(0, 0)] + p.noise(), k[(0, 1)], k[(1, 1)] + p.noise());
    let det = a * d - b * b;
    // [a b; b d]⁻¹ = [d −b; −b a] / det
    let quad = (d * y[0] * y[0] - 2.0 * b * y[0] * y[1] + a * y[1] * y[1]) / det;
    let want = -0.5 * det.ln() - 0.5 * quad - (2.0 * std::f64::consts::PI).ln();
    assert!((marginal_log_likelihood(&m) - want).abs() < 1e-10);
}

#[test]
fn one_point_prediction() {
    let x = DMatrix::from_row_slice(1, 1, &[0.3]);
    let m = model(KernelKind::RbfArd, &hyper(1, 0.0, vec![0.0], 0.0, 0.0), &x, &DVector::from_vec(vec![2.0]));
    let pd = predict(&m, &[0.3]).unwrap();
    assert!((pd.mean - 1.0).abs() < 1e-12);
    assert!((pd.variance - 1.5).abs() < 1e-12);
}

#[test]
fn far_point_recovers_prior() {
    let p = hyper(2, 0.4, vec![-1.0, -1.0], -2.0, 0.0);
    let x = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 0.2, -0.1, -0.3, 0.4]);
    let m = model(KernelKind::RbfArd, &p, &x, &DVector::from_vec(vec![1.0, -1.0, 1.0]));
    let pd = predict(&m, &[100.0, -100.0]).unwrap();
    assert!(pd.mean.abs() < 1e-6);
    assert!((pd.variance - (p.output_scale() + p.noise())).abs() < 1e-6);
}

#[test]
fn noiseless_interpolation() {
    let p = hyper(1, 0.0, vec![-1.0], 1e-8f64.ln(), 0.0);
    let x = DMatrix::from_row_slice(5, 1, &[-1.0, -0.4, 0.1, 0.6, 1.3]);
    let y = DVector::from_vec(vec![0.3, -1.0, 0.8, 1.0, -0.2]);
    let m = model(KernelKind::RbfArd, &p, &x, &y);
    for i in 0..5 {
        let pd = predict(&m, &[x[(i, 0)]]).unwrap();
        assert!((pd.mean - y[i]).abs() < 1e-4, "point {i}: {} vs {}", pd.mean, y[i]);
    }
}

#[test]
fn zero_targets_noise_gradient() {
    let p = hyper(2, 0.1, vec![0.2, -0.2], -1.0, 0.0);
    let x = DMatrix::from_row_slice(4, 2, &[0.1, 0.2, 0.9, -0.3, -0.5, 0.5, 0.0, 1.0]);
    let m = model(KernelKind::Additive, &p, &x, &DVector::zeros(4));
    let k = gram_matrix(KernelKind::Additive, &p, &x, &x).unwrap() + DMatrix::identity(4, 4) * p.noise();
    let inv = k.try_inverse().unwrap();
    let want = -0.5 * p.noise() * inv.trace();
    let g = mll_gradients(&m);
    assert!((g[p.idx_noise()] - want).abs() < 1e-10);
    // quadratic term vanishes
    let det = (gram_matrix(KernelKind::Additive, &p, &x, &x).unwrap() + DMatrix::identity(4, 4) * p.noise()).determinant();
    let mll = -0.5 * det.ln() - 2.0 * (2.0 * std::f64::consts::PI).ln();
    assert!((marginal_log_likelihood(&m) - mll).abs() < 1e-10);
}

#[test]
fn fitted_stationary_point_has_small_gradient() {
    let (x, y) = synthetic_gp_data(11, 24, 0.6, 1.0, 0.05);
    let m = GpModel::new(KernelKind::RbfArd, KernelHyperparams::new(1), GpTrainingSet::new(x, y).unwrap()).unwrap();
    let fitted = fit(m, 3000, 1e-2).unwrap().model;
    let g = mll_gradients(&fitted);
    let n = common::norm(&g);
    assert!(n < 1e-3, "gradient norm {n}");
}

#[test]
fn zero_learning_rate_is_identity() {
    let (x, y) = synthetic_gp_data(3, 10, 0.5, 1.0, 0.01);
    let p = KernelHyperparams::new(1);
    let m = GpModel::new(KernelKind::RbfArd, p.clone(), GpTrainingSet::new(x, y).unwrap()).unwrap();
    let r = fit(m, 25, 0.0).unwrap();
    assert_eq!(r.model.params(), &p);
}

#[test]
fn fit_improves_on_twenty_seeds() {
    for seed in 0..20 {
        let (x, y) = synthetic_gp_data(100 + seed, 16, 0.5, 1.0, 0.01);
        let m = GpModel::new(KernelKind::RbfArd, KernelHyperparams::new(1), GpTrainingSet::new(x, y).unwrap()).unwrap();
        let r = fit(m, 50, 1e-2).unwrap();
        assert!(r.trace.last().unwrap() >= &r.trace[0], "seed {seed}");
        for w in r.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-6, "seed {seed}: {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn fit_is_deterministic() {
    let (x, y) = synthetic_gp_data(5, 20, 0.5, 1.0, 0.01);
    let set = GpTrainingSet::new(x, y).unwrap();
    let run = || {
        let m = GpModel::new(KernelKind::Additive, KernelHyperparams::new(1), set.clone()).unwrap();
        fit(m, 40, 1e-2).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.model.params(), b.model.params());
}

#[test]
fn known_lengthscale_is_recovered() {
    let (x, y) = synthetic_gp_data(42, 64, 0.5, 1.0, 0.01);
    let grid = grid_best_lengthscale(&x, &y, 1.0, 0.01);
    assert!(grid > 0.25 && grid < 1.0, "grid optimum {grid}");
    let m = GpModel::new(KernelKind::RbfArd, KernelHyperparams::new(1), GpTrainingSet::new(x, y).unwrap()).unwrap();
    let l = fit(m, 500, 1e-2).unwrap().model.params().lengthscale(0);
    assert!(l > 0.25 && l < 1.0, "fitted lengthscale {l}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mll_and_prediction_match_dense_solves((k, p, x, y, star) in problem()) {
        let m = model(k, &p, &x, &y);
        let gram = gram_matrix(k, &p, &x, &x).unwrap();
        prop_assume!(m.jitter() == 0.0);
        let want = dense_mll(&gram, &y, p.noise());
        prop_assert!((marginal_log_likelihood(&m) - want).abs() < 1e-10);

        let kstar = DVector::from_fn(x.nrows(), |i, _| {
            let xi: Vec<f64> = x.row(i).iter().copied().collect();
            eval_kernel(k, &p, &xi, &star).unwrap()
        });
        let kss = eval_kernel(k, &p, &star, &star).unwrap();
        let (mean, var) = dense_predict(&gram, &y, p.noise(), &kstar, kss);
        let pd = predict(&m, &star).unwrap();
        prop_assert!((pd.mean - mean).abs() < 1e-10);
        prop_assert!((pd.variance - var).abs() < 1e-10);
        prop_assert!(pd.variance >= p.noise() - 1e-10);
    }

    #[test]
    fn prediction_is_permutation_invariant((k, p, x, y, star) in problem(), shift in 0usize..8) {
        let n = x.nrows();
        let perm: Vec<usize> = (0..n).map(|i| (i * 5 + shift) % n).rev().collect();
        prop_assume!({ let mut s = perm.clone(); s.sort(); s.dedup(); s.len() == n });
        let xp = DMatrix::from_fn(n, x.ncols(), |i, j| x[(perm[i], j)]);
        let yp = DVector::from_fn(n, |i, _| y[perm[i]]);
        let a = predict(&model(k, &p, &x, &y), &star).unwrap();
        let b = predict(&model(k, &p, &xp, &yp), &star).unwrap();
        prop_assert!((a.mean - b.mean).abs() < 1e-10);
        prop_assert!((a.variance - b.variance).abs() < 1e-10);
    }

    #[test]
    fn mll_gradient_matches_finite_differences((k, p, x, y, _s) in problem()) {
        let m = model(k, &p, &x, &y);
        let analytic = mll_gradients(&m);
        let set = m.data().clone();
        let numeric = fd_grad(&p.to_vec(), |flat| {
            let mut q = p.clone();
            q.set_from_slice(flat).unwrap();
            marginal_log_likelihood(&GpModel::new(k, q, set.clone()).unwrap())
        });
        let e = rel_err(&analytic, &numeric, marginal_log_likelihood(&m));
        prop_assert!(e < 1e-5, "relative error {e:e}");
    }
}
