//! Mask algebra and sparsity-distribution construction.

mod distribution;
pub mod export;
mod mask;

pub use distribution::{erk_distribution, erk_rates, uniform_distribution, uniform_rates, SparsityDistribution};
pub use mask::{
    apply_mask, global_sparsity, keep_count, nm_mask, topk_mask, weight_sparsity, NmPattern, SparseMask,
};
