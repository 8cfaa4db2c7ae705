//! Cost-volume aggregation layers with hand-written reverse passes.

mod attention;
mod bilinear;
mod conv;
mod ddt;
mod params;
mod sparse4d;
mod volume;

pub use attention::{
    attention_weights, deformable_attention_2d, deformable_attention_backward, offset_network,
    offset_network_backward, AttentionParams, OffsetNet, DEFAULT_MAX_OFFSET,
};
pub use bilinear::{bilinear_sample, bilinear_sample_backward};
pub use conv::Conv2d;
pub use ddt::{ddt_backward, ddt_branch_forward, ddt_forward, DdtBranch, DdtConfig, DdtParams, DdtPass};
pub use params::{accumulate, zeros_like, Parameterized};
pub use sparse4d::{sparse_conv4d, sparse_conv4d_backward, Sparse4dConvParams};
pub use volume::Volume;

pub(crate) use bilinear::{grid_coord, sample_backward_raw, sample_raw};
pub(crate) use params::{prefixed, prefixed_mut};

use crate::error::{DacmError, Result};
use crate::tensor::Tensor;

/// One differentiable aggregation op bound to its input and parameters.
#[derive(Debug, Clone, Copy)]
pub enum AggregationOp<'a> {
    OffsetNetwork {
        slice: &'a Tensor,
        params: &'a AttentionParams,
    },
    DeformableAttention {
        slice: &'a Tensor,
        params: &'a AttentionParams,
    },
    Ddt {
        volume: &'a Volume,
        params: &'a DdtParams,
    },
    SparseConv4d {
        volume: &'a Volume,
        params: &'a Sparse4dConvParams,
    },
}

#[derive(Debug, Clone)]
pub struct OpGradients {
    /// same layout as the op input
    pub input: Vec<f64>,
    /// named parameter gradients in the op's parameter order
    pub params: Vec<(String, Tensor)>,
}

fn owned<P: Parameterized>(p: &P) -> Vec<(String, Tensor)> {
    p.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect()
}

impl AggregationOp<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            AggregationOp::OffsetNetwork { .. } => "offset_network",
            AggregationOp::DeformableAttention { .. } => "deformable_attention_2d",
            AggregationOp::Ddt { .. } => "ddt_forward",
            AggregationOp::SparseConv4d { .. } => "sparse_conv4d",
        }
    }

    /// Flattened forward output.
    pub fn forward(&self) -> Result<Vec<f64>> {
        Ok(match *self {
            AggregationOp::OffsetNetwork { slice, params } => offset_network(slice, params)?.into_data(),
            AggregationOp::DeformableAttention { slice, params } => {
                deformable_attention_2d(slice, params)?.into_data()
            }
            AggregationOp::Ddt { volume, params } => ddt_forward(volume, &params.sdt, &params.qdt)?.into_data(),
            AggregationOp::SparseConv4d { volume, params } => sparse_conv4d(volume, params)?.into_data(),
        })
    }
}

/// Reverse-mode gradients of `Σ upstream ⊙ op(input)` with respect to the
/// input and every parameter tensor. `upstream` is the flattened cotangent of
/// the forward output.
pub fn parameter_gradients(op: AggregationOp<'_>, upstream: &[f64]) -> Result<OpGradients> {
    let mismatch = |n: usize| {
        DacmError::dim(format!(
            "{} output has {n} values, upstream has {}",
            op.name(),
            upstream.len()
        ))
    };
    match op {
        AggregationOp::OffsetNetwork { slice, params } => {
            let s = slice.shape();
            let shape = [params.heads, 2, s.get(1).copied().unwrap_or(0), s.get(2).copied().unwrap_or(0)];
            let n = shape.iter().product();
            if upstream.len() != n {
                return Err(mismatch(n));
            }
            let up = Tensor::from_vec(&shape, upstream.to_vec())?;
            let (dx, g) = offset_network_backward(slice, params, &up)?;
            let mut named = owned(&g);
            named.retain(|(n, _)| n.starts_with("offset."));
            Ok(OpGradients {
                input: dx.into_data(),
                params: named,
            })
        }
        AggregationOp::DeformableAttention { slice, params } => {
            let s = slice.shape();
            let shape = [
                params.projected_channels(),
                s.get(1).copied().unwrap_or(0),
                s.get(2).copied().unwrap_or(0),
            ];
            let n = shape.iter().product();
            if upstream.len() != n {
                return Err(mismatch(n));
            }
            let up = Tensor::from_vec(&shape, upstream.to_vec())?;
            let (dx, g) = deformable_attention_backward(slice, params, &up)?;
            Ok(OpGradients {
                input: dx.into_data(),
                params: owned(&g),
            })
        }
        AggregationOp::Ddt { volume, params } => {
            let n = volume.channel_len();
            if upstream.len() != n {
                return Err(mismatch(n));
            }
            let up = Volume::new(1, volume.dims(), upstream.to_vec())?;
            let (dx, g) = ddt_backward(volume, params, &up)?;
            Ok(OpGradients {
                input: dx.into_data(),
                params: owned(&g),
            })
        }
        AggregationOp::SparseConv4d { volume, params } => {
            let n = params.c_out * volume.channel_len();
            if upstream.len() != n {
                return Err(mismatch(n));
            }
            let up = Volume::new(params.c_out, volume.dims(), upstream.to_vec())?;
            let (dx, g) = sparse_conv4d_backward(volume, params, &up)?;
            Ok(OpGradients {
                input: dx.into_data(),
                params: owned(&g),
            })
        }
    }
}
