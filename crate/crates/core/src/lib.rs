//! Post-training sparsity: prune a pre-trained network with only a small
//! calibration set, then recover it by distillation-driven dynamic sparse
//! training.

pub mod data;
pub mod error;
pub mod harness;
pub mod nn;
pub mod objective;
pub mod search;
pub mod seed;
pub mod sparsity;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
