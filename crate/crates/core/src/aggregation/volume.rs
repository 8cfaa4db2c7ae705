use crate::cost_volume::CostVolume;
use crate::error::{DacmError, Result};

/// Multi-channel 4D tensor `c × h_q × w_q × h_s × w_s` flowing through the
/// aggregation layers. Unlike [`CostVolume`] its entries may be negative.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    channels: usize,
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Volume {
    pub fn new(channels: usize, dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if channels * dims.iter().product::<usize>() != data.len() {
            return Err(DacmError::dim(format!(
                "volume {channels}x{dims:?} got {} values",
                data.len()
            )));
        }
        Ok(Volume {
            channels,
            dims,
            data,
        })
    }

    pub fn zeros(channels: usize, dims: [usize; 4]) -> Self {
        Volume {
            channels,
            dims,
            data: vec![0.0; channels * dims.iter().product::<usize>()],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn query_positions(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn support_positions(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    pub fn channel_len(&self) -> usize {
        self.query_positions() * self.support_positions()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.channel_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Volume {
        Volume {
            channels: self.channels,
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl From<&CostVolume> for Volume {
    fn from(c: &CostVolume) -> Self {
        Volume {
            channels: 1,
            dims: c.dims(),
            data: c.data().to_vec(),
        }
    }
}

impl From<CostVolume> for Volume {
    fn from(c: CostVolume) -> Self {
        let dims = c.dims();
        Volume {
            channels: 1,
            dims,
            data: c.into_data(),
        }
    }
}
