use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::mask::keep_count;
use crate::error::{Error, Result};
use crate::nn::Network;

/// Per-layer sparsity rates for the prunable layers of a network, together
/// with the global rate they were built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityDistribution {
    pub rates: Vec<f64>,
    pub target: f64,
}

impl SparsityDistribution {
    pub fn new(rates: Vec<f64>, target: f64) -> Result<Self> {
        if let Some(r) = rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Config(format!("layer rate {r} outside [0, 1]")));
        }
        if !(0.0..=1.0).contains(&target) {
            return Err(Error::Config(format!("target {target} outside [0, 1]")));
        }
        Ok(SparsityDistribution { rates, target })
    }

    /// `Σ r·numel / Σ numel`.
    pub fn induced_sparsity(&self, numels: &[usize]) -> f64 {
        let total: usize = numels.iter().sum();
        let pruned: f64 = self.rates.iter().zip(numels).map(|(r, &n)| r * n as f64).sum();
        pruned / total.max(1) as f64
    }

    /// Sparsity actually realized by magnitude masks at these rates, after
    /// flooring kept counts per layer.
    pub fn realized_sparsity(&self, numels: &[usize]) -> f64 {
        let total: usize = numels.iter().sum();
        let kept: usize = self.rates.iter().zip(numels).map(|(&r, &n)| keep_count(r, n)).sum();
        1.0 - kept as f64 / total.max(1) as f64
    }

    /// Aligned per-layer rate table. The same text is read back by
    /// [`SparsityDistribution::parse_summary`].
    pub fn summary(&self, net: &Network) -> String {
        let numels = net.prunable_numels();
        let mut out = String::new();
        writeln!(out, "# target {:?}", self.target).unwrap();
        writeln!(out, "# realized {:.6}", self.realized_sparsity(&numels)).unwrap();
        writeln!(out, "{:<6} {:<8} {:<14} {:>9} {:>9} rate", "layer", "kind", "shape", "numel", "kept").unwrap();
        for ((p, &i), rate) in net.prunable_indices().iter().enumerate().zip(&self.rates) {
            let layer = &net.layers()[i];
            let shape = layer
                .weight
                .as_ref()
                .unwrap()
                .shape()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            writeln!(
                out,
                "{:<6} {:<8} {:<14} {:>9} {:>9} {:?}",
                i,
                layer.spec.name(),
                shape,
                numels[p],
                keep_count(*rate, numels[p]),
                rate
            )
            .unwrap();
        }
        out
    }

    pub fn parse_summary(text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("distribution summary", d);
        let mut target = None;
        let mut rates = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("target") {
                    target = Some(v.trim().parse::<f64>().map_err(|e| bad(e.to_string()))?);
                }
                continue;
            }
            if line.starts_with("layer") {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 6 {
                return Err(bad(format!("expected 6 columns in `{line}`")));
            }
            rates.push(cols[5].parse::<f64>().map_err(|e| bad(e.to_string()))?);
        }
        Self::new(rates, target.ok_or_else(|| bad("missing target line".into()))?)
    }
}

/// Every included layer at the same rate, scaled up so that excluded
/// (dense) layers are paid for by the rest.
pub fn uniform_distribution(net: &Network, target: f64) -> Result<SparsityDistribution> {
    uniform_rates(&net.prunable_numels(), target, &[])
}

pub fn uniform_rates(numels: &[usize], target: f64, exclude: &[usize]) -> Result<SparsityDistribution> {
    let total: usize = numels.iter().sum();
    let included: usize = numels
        .iter()
        .enumerate()
        .filter(|(i, _)| !exclude.contains(i))
        .map(|(_, &n)| n)
        .sum();
    let rate = target * total as f64 / included.max(1) as f64;
    if rate > 1.0 + 1e-12 {
        return Err(Error::Config(format!(
            "target {target} unreachable with layers {exclude:?} kept dense"
        )));
    }
    let rates = (0..numels.len())
        .map(|i| if exclude.contains(&i) { 0.0 } else { rate.min(1.0) })
        .collect();
    SparsityDistribution::new(rates, target)
}

/// Erdős–Rényi-kernel distribution: layer density proportional to
/// `Σ dims / Π dims` of the weight tensor, scaled to meet the global
/// target. Layers whose density would exceed 1 are kept dense and the
/// others rescaled until no density exceeds 1.
pub fn erk_distribution(net: &Network, target: f64) -> Result<SparsityDistribution> {
    let shapes: Vec<Vec<usize>> = net.prunable_weights().iter().map(|w| w.shape().to_vec()).collect();
    erk_rates(&shapes, target, &[])
}

pub fn erk_rates(shapes: &[Vec<usize>], target: f64, exclude: &[usize]) -> Result<SparsityDistribution> {
    let numels: Vec<f64> = shapes.iter().map(|s| s.iter().product::<usize>() as f64).collect();
    let raw: Vec<f64> = shapes
        .iter()
        .zip(&numels)
        .map(|(s, n)| s.iter().sum::<usize>() as f64 / n)
        .collect();
    let total: f64 = numels.iter().sum();
    let budget = (1.0 - target) * total;
    let mut dense: Vec<bool> = (0..shapes.len()).map(|i| exclude.contains(&i)).collect();
    loop {
        let fixed: f64 = numels.iter().zip(&dense).filter(|(_, &d)| d).map(|(n, _)| n).sum();
        let weighted: f64 = (0..shapes.len()).filter(|&i| !dense[i]).map(|i| raw[i] * numels[i]).sum();
        let remaining = budget - fixed;
        if remaining < -1e-9 * total {
            return Err(Error::Config(format!("target {target} unreachable with dense layers")));
        }
        let eps = if weighted > 0.0 { remaining.max(0.0) / weighted } else { 0.0 };
        let overflow: Vec<usize> = (0..shapes.len()).filter(|&i| !dense[i] && eps * raw[i] > 1.0).collect();
        if overflow.is_empty() {
            let rates = (0..shapes.len())
                .map(|i| if dense[i] { 0.0 } else { (1.0 - eps * raw[i]).clamp(0.0, 1.0) })
                .collect();
            return SparsityDistribution::new(rates, target);
        }
        for i in overflow {
            dense[i] = true;
        }
    }
}
