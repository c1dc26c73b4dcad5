use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Network;
use crate::tensor::Tensor;

/// Binary masks, one per prunable layer, each congruent to that layer's
/// weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMask {
    layers: Vec<Tensor>,
}

impl SparseMask {
    pub fn new(layers: Vec<Tensor>) -> Result<Self> {
        for (i, m) in layers.iter().enumerate() {
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Shape(format!("mask {i} is not binary")));
            }
        }
        Ok(SparseMask { layers })
    }

    /// All-ones masks for every prunable layer of `net`.
    pub fn dense(net: &Network) -> Self {
        SparseMask {
            layers: net.prunable_weights().iter().map(|w| Tensor::ones(w.shape())).collect(),
        }
    }

    /// Magnitude masks at the given per-layer rates.
    pub fn from_rates(net: &Network, rates: &[f64]) -> Result<Self> {
        let weights = net.prunable_weights();
        if weights.len() != rates.len() {
            return Err(Error::Shape(format!(
                "{} rates for {} prunable layers",
                rates.len(),
                weights.len()
            )));
        }
        Ok(SparseMask {
            layers: weights.iter().zip(rates).map(|(w, &r)| topk_mask(w, r)).collect(),
        })
    }

    /// N:M masks for every prunable layer.
    pub fn from_pattern(net: &Network, pattern: NmPattern) -> Self {
        SparseMask {
            layers: net.prunable_weights().iter().map(|w| nm_mask(w, pattern)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer(&self, p: usize) -> &Tensor {
        &self.layers[p]
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn nnz(&self) -> Vec<usize> {
        self.layers.iter().map(count_ones).collect()
    }

    /// `1 − ones / total` over every prunable weight.
    pub fn global_sparsity(&self) -> f64 {
        let total: usize = self.layers.iter().map(Tensor::numel).sum();
        let ones: usize = self.nnz().iter().sum();
        if total == 0 {
            0.0
        } else {
            1.0 - ones as f64 / total as f64
        }
    }

    /// Fraction of entries that differ from `other`.
    pub fn churn(&self, other: &SparseMask) -> f64 {
        let mut flipped = 0usize;
        let mut total = 0usize;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            total += a.numel();
            flipped += a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count();
        }
        if total == 0 {
            0.0
        } else {
            flipped as f64 / total as f64
        }
    }
}

fn count_ones(t: &Tensor) -> usize {
    t.data().iter().filter(|&&v| v != 0.0).count()
}

/// Number of weights a layer of `numel` weights keeps at `rate`:
/// `⌊(1 − rate)·numel⌋`. A 1e-9 guard absorbs representation error so that,
/// e.g., rate 0.9 over 1000 weights keeps 100 rather than 99.
pub fn keep_count(rate: f64, numel: usize) -> usize {
    let k = ((1.0 - rate) * numel as f64 + 1e-9).floor();
    (k.max(0.0) as usize).min(numel)
}

/// Ones on the `⌊(1 − rate)·S⌋` largest-magnitude entries. Equal magnitudes
/// are ranked by ascending flat index.
pub fn topk_mask(weights: &Tensor, rate: f64) -> Tensor {
    let n = weights.numel();
    let k = keep_count(rate.clamp(0.0, 1.0), n);
    let mut mask = Tensor::zeros(weights.shape());
    if k == n {
        mask.data_mut().fill(1.0);
        return mask;
    }
    if k == 0 {
        return mask;
    }
    let w = weights.data();
    let mut idx: Vec<usize> = (0..n).collect();
    let by_rank = |&a: &usize, &b: &usize| -> Ordering {
        w[b].abs().total_cmp(&w[a].abs()).then(a.cmp(&b))
    };
    idx.select_nth_unstable_by(k - 1, by_rank);
    let m = mask.data_mut();
    for &i in &idx[..k] {
        m[i] = 1.0;
    }
    mask
}

/// Semi-structured N:M pattern: at most `n` surviving weights in every `m`
/// consecutive weights along the reduction axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NmPattern {
    n: usize,
    m: usize,
}

impl NmPattern {
    /// `n == m` is accepted as the degenerate keep-all pattern.
    pub fn new(n: usize, m: usize) -> Result<Self> {
        if n == 0 || n > m {
            return Err(Error::InvalidPattern { n, m });
        }
        Ok(NmPattern { n, m })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Parses `"2:4"`.
    pub fn parse(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("expected N:M, got `{s}`")))?;
        let parse = |x: &str| {
            x.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("expected N:M, got `{s}`")))
        };
        Self::new(parse(a)?, parse(b)?)
    }

    /// Kept weights in one reduction row of length `len`.
    pub fn keep_in_row(&self, len: usize) -> usize {
        (len / self.m) * self.n + (len % self.m).min(self.n)
    }
}

impl std::fmt::Display for NmPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.n, self.m)
    }
}

/// N:M mask. A weight tensor `[out, …]` is viewed as `out` reduction rows
/// (input channels × kernel taps, flattened); groups are `m` consecutive
/// entries of a row. A short trailing group keeps `min(n, len)` entries.
pub fn nm_mask(weights: &Tensor, pattern: NmPattern) -> Tensor {
    let row_len = if weights.shape().len() <= 1 {
        weights.numel()
    } else {
        weights.row_len()
    };
    let mut mask = Tensor::zeros(weights.shape());
    let w = weights.data();
    let m = mask.data_mut();
    let mut order: Vec<usize> = Vec::with_capacity(pattern.m);
    for row_start in (0..w.len()).step_by(row_len.max(1)) {
        let row_end = (row_start + row_len).min(w.len());
        for g in (row_start..row_end).step_by(pattern.m) {
            let ge = (g + pattern.m).min(row_end);
            order.clear();
            order.extend(g..ge);
            order.sort_by(|&a, &b| w[b].abs().total_cmp(&w[a].abs()).then(a.cmp(&b)));
            for &i in order.iter().take(pattern.n) {
                m[i] = 1.0;
            }
        }
    }
    mask
}

/// Elementwise product `W ⊙ M`.
pub fn apply_mask(weights: &Tensor, mask: &Tensor) -> Result<Tensor> {
    weights.zip_map(mask, |w, m| w * m)
}

/// `1 − ones / total` over the masks of every prunable layer.
pub fn global_sparsity(net: &Network, masks: &SparseMask) -> Result<f64> {
    let numels = net.prunable_numels();
    if numels.len() != masks.len() || numels.iter().zip(masks.layers()).any(|(&n, m)| n != m.numel()) {
        return Err(Error::Shape("masks are not congruent with the network".into()));
    }
    Ok(masks.global_sparsity())
}

/// Fraction of exactly-zero entries across the prunable weights.
pub fn weight_sparsity(net: &Network) -> f64 {
    let weights = net.prunable_weights();
    let total: usize = weights.iter().map(|w| w.numel()).sum();
    let zeros: usize = weights
        .iter()
        .map(|w| w.data().iter().filter(|&&v| v == 0.0).count())
        .sum();
    zeros as f64 / total.max(1) as f64
}
