//! Minimal differentiable network engine over a fixed layer menu.

pub mod checkpoint;
mod conv;
mod layer;
mod network;
mod preset;

pub use layer::{BnStats, Layer, LayerSpec};
pub use network::{ForwardTrace, Gradients, Mode, Network, ParamGrads, BN_EPS};
pub use preset::{build_preset, preset_specs, PRESETS};

use crate::tensor::Tensor;

/// Row-wise softmax of a `batch × classes` logit matrix.
pub fn predict_distribution(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let c = logits.row_len();
    for row in out.data_mut().chunks_mut(c.max(1)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}
