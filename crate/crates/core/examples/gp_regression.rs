//! Fits an exact GP to noisy samples of a sine and prints predictions.
//!
//! cargo run --release --example gp_regression -- [steps]

use dacm::gp::{fit, marginal_log_likelihood, predict, GpModel, GpTrainingSet};
use dacm::kernels::{KernelHyperparams, KernelKind};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> dacm::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 40;
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let ys: Vec<f64> = xs.iter().map(|x| (2.0 * x).sin() + 0.05 * rng.random_range(-1.0..1.0)).collect();
    let data = GpTrainingSet::new(DMatrix::from_column_slice(n, 1, &xs), DVector::from_vec(ys))?;
    let model = GpModel::new(KernelKind::RbfArd, KernelHyperparams::new(1), data)?;
    println!("initial mll {:.3}", marginal_log_likelihood(&model));
    let out = fit(model, steps, 5e-2)?;
    let p = out.model.params();
    println!(
        "fitted mll {:.3}  lengthscale {:.3}  output scale {:.3}  noise {:.2e}",
        marginal_log_likelihood(&out.model),
        p.lengthscale(0),
        p.output_scale(),
        p.noise()
    );
    for x in [-2.0, -1.0, 0.0, 1.0, 2.0] {
        let d = predict(&out.model, &[x])?;
        println!("x = {x:5.1}  mean {:7.4}  sd {:.4}  truth {:7.4}", d.mean, d.variance.sqrt(), (2.0 * x).sin());
    }
    Ok(())
}
