use crate::error::{DacmError, Result};
use crate::tensor::Tensor;

/// A set of named parameter tensors. Gradients of a layer use the same type
/// as its parameters, so optimisers and checkpoints only need this view.
pub trait Parameterized {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, t) in self.named_params() {
            out.extend_from_slice(t.data());
        }
        out
    }

    fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(DacmError::dim(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for (_, t) in self.named_params_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    fn zero_(&mut self) {
        for (_, t) in self.named_params_mut() {
            t.fill(0.0);
        }
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, items: Vec<(String, &'a Tensor)>) -> Vec<(String, &'a Tensor)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

pub(crate) fn prefixed_mut<'a>(
    prefix: &str,
    items: Vec<(String, &'a mut Tensor)>,
) -> Vec<(String, &'a mut Tensor)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

/// Zero-valued gradient buffer with the same layout as `p`.
pub fn zeros_like<P: Parameterized + Clone>(p: &P) -> P {
    let mut g = p.clone();
    g.zero_();
    g
}

/// `acc += other`, tensor by tensor.
pub fn accumulate<P: Parameterized>(acc: &mut P, other: &P) {
    let src = other.named_params();
    for ((_, a), (_, b)) in acc.named_params_mut().into_iter().zip(src) {
        a.add_assign(b);
    }
}
