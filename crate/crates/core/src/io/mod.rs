//! On-disk formats: tensor files, checkpoints, kernel snapshots, traces and
//! PGM dumps.

pub mod checkpoint;
pub mod hyper;
pub mod pgm;
pub mod tensor_file;
pub mod trace;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use hyper::{hyperparams_from_pairs, hyperparams_to_text, kernels_from_text, kernels_to_text, parse_pairs};
pub use pgm::{encode_pgm, scale_to_u8, write_pgm};
pub use tensor_file::{decode_tensor, encode_tensor, read_tensor, write_tensor};
pub use trace::{parse_trace, trace_to_csv, write_trace, TRACE_HEADER};
