//! Evaluates the three kernel families and their gradients on a pair of points.
//!
//! cargo run --example kernel_gallery

use dacm::kernels::{eval_kernel, gram_matrix, kernel_param_gradients, KernelHyperparams, KernelKind};
use nalgebra::DMatrix;

fn main() -> dacm::Result<()> {
    let mut p = KernelHyperparams::new(2);
    p.log_lengthscales = vec![0.5f64.ln(), 2.0f64.ln()];
    let (a, b) = ([0.3, -0.4], [0.1, 0.8]);
    for kind in [KernelKind::Linear, KernelKind::RbfArd, KernelKind::Additive] {
        let k = eval_kernel(kind, &p, &a, &b)?;
        let g = kernel_param_gradients(kind, &p, &a, &b)?;
        println!("{kind}: k = {k:.6}  d/dlog-params = {g:.4?}");
    }
    let x = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 0.5, 0.0, 0.0, 0.5]);
    // shorter lengthscale on dim 0 makes the first neighbour less similar
    println!("rbf gram:{}", gram_matrix(KernelKind::RbfArd, &p, &x, &x)?);
    Ok(())
}
