//! Sparsity objectives and their gradients.
//!
//! Distribution losses take the dense (teacher) probabilities `Z` and the
//! sparse (student) probabilities `Ẑ`, average over the batch, and return the
//! gradient with respect to the student's logits, assuming `Ẑ = softmax(logits)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to `Ẑ` inside the log.
pub const PROB_FLOOR: f64 = 1e-12;
const NORMALIZATION_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepUnit {
    Epoch,
    Iteration,
}

/// Decay of the log base, `e·γ^t`. By change of base the loss is the natural
/// log KL times `1 / (1 + t·ln γ)`; the denominator is clamped from below so
/// the scale stays positive once the base would drop to 1 or under.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecaySchedule {
    pub gamma: f64,
    pub unit: StepUnit,
    pub clamp_min_denominator: f64,
}

impl Default for DecaySchedule {
    fn default() -> Self {
        DecaySchedule {
            gamma: 0.99,
            unit: StepUnit::Epoch,
            clamp_min_denominator: 0.05,
        }
    }
}

impl DecaySchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("decay gamma {} outside (0, 1]", self.gamma)));
        }
        if !(self.clamp_min_denominator > 0.0) {
            return Err(Error::Config("clamp denominator must be positive".into()));
        }
        Ok(())
    }

    pub fn scale(&self, t: f64) -> f64 {
        1.0 / (1.0 + t * self.gamma.ln()).max(self.clamp_min_denominator)
    }

    /// Schedule step for a training iteration: the epoch index
    /// `⌊iter·batch / calib⌋`, or the iteration itself.
    pub fn step(&self, iteration: usize, batch_size: usize, calib_len: usize) -> f64 {
        match self.unit {
            StepUnit::Epoch => ((iteration * batch_size) / calib_len.max(1)) as f64,
            StepUnit::Iteration => iteration as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    BaseDecayedKl,
    Kl,
    CrossEntropy,
    LayerwiseMse,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base_decayed_kl" => Ok(Objective::BaseDecayedKl),
            "kl" => Ok(Objective::Kl),
            "ce" | "cross_entropy" => Ok(Objective::CrossEntropy),
            "layerwise_mse" => Ok(Objective::LayerwiseMse),
            _ => Err(Error::Config(format!("unknown objective `{s}`"))),
        }
    }
}

fn check_rows(p: &Tensor) -> Result<()> {
    let c = p.row_len();
    for (row, r) in p.data().chunks(c.max(1)).enumerate() {
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL || r.iter().any(|&v| v < 0.0) {
            return Err(Error::NotNormalized { row, sum });
        }
    }
    Ok(())
}

/// Batch mean of `Σ_j Z_j ln(Z_j / Ẑ_j)`, with `0·ln 0 = 0`.
pub fn kl_loss(z: &Tensor, zhat: &Tensor) -> Result<LossGrad> {
    if z.shape() != zhat.shape() || z.shape().len() != 2 {
        return Err(Error::Shape(format!("{:?} vs {:?}", z.shape(), zhat.shape())));
    }
    check_rows(z)?;
    check_rows(zhat)?;
    let b = z.rows() as f64;
    let mut total = 0.0;
    for (&p, &q) in z.data().iter().zip(zhat.data()) {
        if p > 0.0 {
            total += p * (p.ln() - q.max(PROB_FLOOR).ln());
        }
    }
    let grad = zhat.zip_map(z, |q, p| (q - p) / b)?;
    Ok(LossGrad { loss: total / b, grad })
}

/// KL with the decayed log base: exactly `scale(t)` times [`kl_loss`], for
/// the loss and its gradient.
pub fn base_decayed_kl(z: &Tensor, zhat: &Tensor, t: f64, schedule: &DecaySchedule) -> Result<LossGrad> {
    let LossGrad { loss, grad } = kl_loss(z, zhat)?;
    let s = schedule.scale(t);
    Ok(LossGrad {
        loss: s * loss,
        grad: grad.scale(s),
    })
}

/// Squared L2 distance `‖Y − Ŷ‖²`; the gradient is with respect to `Ŷ`.
pub fn layerwise_mse(dense: &Tensor, sparse: &Tensor) -> Result<LossGrad> {
    let diff = sparse.zip_map(dense, |a, b| a - b)?;
    let loss = diff.data().iter().map(|d| d * d).sum();
    Ok(LossGrad {
        loss,
        grad: diff.scale(2.0),
    })
}

/// Batch mean of `−ln Ẑ_y`.
pub fn cross_entropy(zhat: &Tensor, labels: &[usize]) -> Result<LossGrad> {
    if zhat.rows() != labels.len() || zhat.shape().len() != 2 {
        return Err(Error::Shape(format!("{:?} vs {} labels", zhat.shape(), labels.len())));
    }
    check_rows(zhat)?;
    let c = zhat.row_len();
    let b = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = zhat.scale(1.0 / b);
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Shape(format!("label {y} out of {c} classes")));
        }
        loss -= zhat.data()[i * c + y].max(PROB_FLOOR).ln();
        grad.data_mut()[i * c + y] -= 1.0 / b;
    }
    Ok(LossGrad { loss: loss / b, grad })
}
