//! Few-shot segmentation core built on learned covariance-kernel cost
//! volumes and doubly deformable 4D aggregation.

pub mod aggregation;
pub mod cli;
pub mod config;
pub mod cost_volume;
pub mod error;
pub mod gp;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod optim;
pub mod pipeline;
pub mod tensor;

pub use config::RunConfig;
pub use error::{DacmError, Result};
