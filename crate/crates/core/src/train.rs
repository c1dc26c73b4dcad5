//! Iteration-wise dynamic sparse training against a frozen dense teacher.
//!
//! Each step runs the teacher (eval mode, unmasked) and the masked student,
//! backpropagates the objective with the straight-through estimator, applies
//! SGD with an extra `α·w` decay on currently pruned weights, and refreshes
//! the magnitude masks every `delta_t` iterations.

use serde::{Deserialize, Serialize};

use crate::data::{BatchCycler, CalibrationSet, Dataset};
use crate::error::{Error, Result};
use crate::nn::{predict_distribution, Gradients, Mode, Network};
use crate::objective::{base_decayed_kl, cross_entropy, kl_loss, layerwise_mse, DecaySchedule, Objective};
use crate::seed::{derive_seed, stage};
use crate::sparsity::{NmPattern, SparseMask, SparsityDistribution};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Initial learning rate of the cosine schedule.
    pub lr: f64,
    /// Extra decay applied to pruned weights only.
    pub alpha: f64,
    /// L2 decay applied to unpruned prunable weights.
    pub weight_decay: f64,
    pub momentum: f64,
    /// Mask refresh interval in iterations.
    pub delta_t: usize,
    pub decay: DecaySchedule,
    pub objective: Objective,
    /// Straight-through gradients for pruned weights.
    pub ste: bool,
    /// Running-statistics momentum for the student's batch-norm layers.
    pub bn_momentum: f64,
    /// Recompute batch-norm statistics on the calibration set after training.
    pub final_bn_recalibration: bool,
    /// Log a metrics record every this many iterations (0 disables).
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 16000,
            batch_size: 64,
            lr: 0.01,
            alpha: 3e-5,
            weight_decay: 1e-4,
            momentum: 0.0,
            delta_t: 1,
            decay: DecaySchedule::default(),
            objective: Objective::BaseDecayedKl,
            ste: true,
            bn_momentum: 0.1,
            final_bn_recalibration: true,
            log_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta_t == 0 {
            return Err(Error::Config("delta_t must be ≥ 1".into()));
        }
        if self.alpha < 0.0 || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("alpha, weight_decay ≥ 0 and momentum in [0, 1) required".into()));
        }
        if self.batch_size == 0 || !(self.lr >= 0.0) {
            return Err(Error::Config("batch_size ≥ 1 and lr ≥ 0 required".into()));
        }
        self.decay.validate()
    }
}

/// How masks are (re)built from the current weights.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskPolicy {
    /// Per-layer magnitude TopK at fixed rates.
    Rates(SparsityDistribution),
    /// N:M groups along the reduction axis.
    Pattern(NmPattern),
}

impl MaskPolicy {
    pub fn build(&self, net: &Network) -> Result<SparseMask> {
        match self {
            MaskPolicy::Rates(d) => SparseMask::from_rates(net, &d.rates),
            MaskPolicy::Pattern(p) => Ok(SparseMask::from_pattern(net, *p)),
        }
    }
}

/// `β₀·½·(1 + cos(π·iter/total))`.
pub fn cosine_lr(iter: usize, total: usize, base: f64) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * iter as f64 / total as f64).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    /// Fraction of mask entries flipped, when the step refreshed the masks.
    pub churn: Option<f64>,
}

/// One row of the training metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    /// Mean churn over the refreshes since the previous record.
    pub churn: f64,
    pub sparsity: f64,
    pub calib_accuracy: f64,
}

pub const METRICS_HEADER: &str = "iter,loss,lr,churn,sparsity,calib_acc";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.8},{:.6},{:.6}",
            self.iteration, self.loss, self.lr, self.churn, self.sparsity, self.calib_accuracy
        )
    }
}

pub struct TrainState {
    pub student: Network,
    pub masks: SparseMask,
    pub iteration: usize,
    pub lr: f64,
    velocity: Option<Vec<(Option<Tensor>, Option<Tensor>)>>,
}

impl TrainState {
    /// Student initialized as a copy of the teacher, in train mode, with
    /// masks built from the teacher's weights.
    pub fn new(teacher: &Network, policy: &MaskPolicy, cfg: &TrainConfig) -> Result<Self> {
        let mut student = teacher.clone();
        student.set_mode(Mode::Train);
        let masks = policy.build(&student)?;
        Ok(TrainState {
            student,
            masks,
            iteration: 0,
            lr: cfg.lr,
            velocity: None,
        })
    }
}

fn check_teacher(teacher: &Network) -> Result<()> {
    if teacher.mode() != Mode::Eval {
        return Err(Error::Config("teacher must be in eval mode".into()));
    }
    Ok(())
}

/// One training iteration. `calib_len` converts the iteration count into
/// epochs for the decay schedule.
pub fn train_step(
    state: &mut TrainState,
    teacher: &Network,
    inputs: &Tensor,
    labels: &[usize],
    policy: &MaskPolicy,
    cfg: &TrainConfig,
    calib_len: usize,
) -> Result<StepMetrics> {
    if teacher.specs() != state.student.specs() || teacher.input_shape() != state.student.input_shape() {
        return Err(Error::Shape("teacher and student architectures differ".into()));
    }
    step(state, Some(teacher), inputs, labels, policy, cfg, calib_len)
}

fn step(
    state: &mut TrainState,
    teacher: Option<&Network>,
    inputs: &Tensor,
    labels: &[usize],
    policy: &MaskPolicy,
    cfg: &TrainConfig,
    calib_len: usize,
) -> Result<StepMetrics> {
    let trace = state.student.forward(inputs, Some(&state.masks))?;
    let zhat = predict_distribution(trace.logits());
    let lg = match cfg.objective {
        Objective::CrossEntropy => cross_entropy(&zhat, labels)?,
        Objective::Kl | Objective::BaseDecayedKl => {
            let teacher = teacher.ok_or_else(|| Error::Config("distillation objective needs a teacher".into()))?;
            let z = predict_distribution(&teacher.logits(inputs, None)?);
            if cfg.objective == Objective::Kl {
                kl_loss(&z, &zhat)?
            } else {
                let t = cfg.decay.step(state.iteration, cfg.batch_size, calib_len);
                base_decayed_kl(&z, &zhat, t, &cfg.decay)?
            }
        }
        Objective::LayerwiseMse => {
            return Err(Error::Config(
                "layer-wise MSE is a per-layer objective; use run_layerwise_reconstruction".into(),
            ))
        }
    };
    let grads = state.student.backward(&trace, &lg.grad, Some(&state.masks), cfg.ste)?;
    let lr = cosine_lr(state.iteration, cfg.iterations, cfg.lr);
    apply_update(state, &grads, lr, cfg);
    state.student.absorb_batch_stats(&trace, cfg.bn_momentum);
    state.iteration += 1;
    state.lr = lr;
    let churn = if state.iteration.is_multiple_of(cfg.delta_t) {
        let fresh = policy.build(&state.student)?;
        let churn = fresh.churn(&state.masks);
        state.masks = fresh;
        Some(churn)
    } else {
        None
    };
    Ok(StepMetrics {
        iteration: state.iteration,
        loss: lg.loss,
        lr,
        churn,
    })
}

/// SGD update. Prunable weights follow
/// `w ← w − β·g − α·w` where the current mask is 0, and
/// `w ← w − β·(g + λ·w)` where it is 1; biases and batch-norm affine
/// parameters take plain SGD steps.
fn apply_update(state: &mut TrainState, grads: &Gradients, lr: f64, cfg: &TrainConfig) {
    let prunable = state.student.prunable_indices();
    let mut mask_of = vec![None; state.student.layers().len()];
    for (p, &i) in prunable.iter().enumerate() {
        mask_of[i] = Some(p);
    }
    let momentum = cfg.momentum;
    if momentum > 0.0 && state.velocity.is_none() {
        state.velocity = Some(
            grads
                .layers
                .iter()
                .map(|g| {
                    (
                        g.weight.as_ref().map(|t| Tensor::zeros(t.shape())),
                        g.bias.as_ref().map(|t| Tensor::zeros(t.shape())),
                    )
                })
                .collect(),
        );
    }
    for (i, (layer, g)) in state.student.layers_mut().iter_mut().zip(&grads.layers).enumerate() {
        let mut vel = state.velocity.as_mut().map(|v| &mut v[i]);
        if let (Some(w), Some(gw)) = (layer.weight.as_mut(), g.weight.as_ref()) {
            let mask = mask_of[i].map(|p| state.masks.layer(p).data());
            let v = vel.as_mut().and_then(|v| v.0.as_mut()).map(|t| t.data_mut());
            update_weights(w.data_mut(), gw.data(), mask, v, lr, cfg);
        }
        if let (Some(b), Some(gb)) = (layer.bias.as_mut(), g.bias.as_ref()) {
            let v = vel.as_mut().and_then(|v| v.1.as_mut()).map(|t| t.data_mut());
            sgd(b.data_mut(), gb.data(), v, lr, momentum);
        }
    }
}

/// Update of one prunable weight tensor against its current mask (`None`
/// for plain SGD), with optional momentum buffer `v`.
pub fn update_weights(w: &mut [f64], g: &[f64], mask: Option<&[f64]>, mut v: Option<&mut [f64]>, lr: f64, cfg: &TrainConfig) {
    let Some(mask) = mask else {
        sgd(w, g, v, lr, cfg.momentum);
        return;
    };
    for k in 0..w.len() {
        let kept = mask[k] != 0.0;
        let mut step = g[k];
        if kept {
            step += cfg.weight_decay * w[k];
        }
        if let Some(v) = v.as_deref_mut() {
            v[k] = cfg.momentum * v[k] + step;
            step = v[k];
        }
        w[k] = if kept {
            w[k] - lr * step
        } else {
            w[k] - lr * step - cfg.alpha * w[k]
        };
    }
}

fn sgd(w: &mut [f64], g: &[f64], v: Option<&mut [f64]>, lr: f64, momentum: f64) {
    match v {
        Some(v) => {
            for ((w, g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = momentum * *v + g;
                *w -= lr * *v;
            }
        }
        None => {
            for (w, g) in w.iter_mut().zip(g) {
                *w -= lr * g;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Eval-mode student whose weights outside `masks` are exactly zero.
    pub student: Network,
    pub masks: SparseMask,
    pub history: Vec<MetricsRecord>,
    /// Churn of every refresh, in order.
    pub churn: Vec<f64>,
}

fn finish(mut student: Network, masks: SparseMask, calib: &CalibrationSet, cfg: &TrainConfig) -> Result<Network> {
    student.set_mode(Mode::Eval);
    if cfg.final_bn_recalibration {
        student.bn_recalibrate(calib.data.input_batches(cfg.batch_size), Some(&masks))?;
    }
    student.hard_mask(&masks)?;
    Ok(student)
}

/// Dynamic sparse training of a copy of `teacher` on the calibration set.
pub fn run_training(
    teacher: &Network,
    policy: &MaskPolicy,
    calib: &CalibrationSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_teacher(teacher)?;
    if calib.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    let mut state = TrainState::new(teacher, policy, cfg)?;
    let mut cycler = BatchCycler::new(calib.len(), cfg.batch_size, derive_seed(cfg.seed, &[stage::TRAIN_SHUFFLE]));
    let mut history = Vec::new();
    let mut churn_log = Vec::new();
    let mut window = (0.0, 0usize, 0.0);
    for _ in 0..cfg.iterations {
        let idx = cycler.next_indices();
        let (x, y) = calib.data.batch(&idx);
        let m = train_step(&mut state, teacher, &x, &y, policy, cfg, calib.len())?;
        if let Some(c) = m.churn {
            churn_log.push(c);
            window.0 += c;
            window.1 += 1;
        }
        window.2 = m.loss;
        if cfg.log_every > 0 && (m.iteration % cfg.log_every == 0 || m.iteration == cfg.iterations) {
            history.push(MetricsRecord {
                iteration: m.iteration,
                loss: window.2,
                lr: m.lr,
                churn: if window.1 > 0 { window.0 / window.1 as f64 } else { 0.0 },
                sparsity: state.masks.global_sparsity(),
                calib_accuracy: eval_accuracy(&state.student, &calib.data, Some(&state.masks), cfg.batch_size)?,
            });
            window = (0.0, 0, 0.0);
        }
    }
    let masks = state.masks.clone();
    let student = finish(state.student, state.masks, calib, cfg)?;
    Ok(TrainOutcome {
        student,
        masks,
        history,
        churn: churn_log,
    })
}

fn eval_accuracy(net: &Network, data: &Dataset, masks: Option<&SparseMask>, batch: usize) -> Result<f64> {
    let mut n = net.clone();
    n.set_mode(Mode::Eval);
    n.accuracy(&data.inputs, &data.labels, masks, batch.max(256))
}

/// Layer-wise reconstruction baseline: one-shot masks, then each prunable
/// layer in turn minimizes the squared distance between its output and the
/// dense layer's output, with earlier layers already sparse. The iteration
/// budget is split evenly across layers; batch-norm statistics stay those of
/// the teacher.
pub fn run_layerwise_reconstruction(
    teacher: &Network,
    policy: &MaskPolicy,
    calib: &CalibrationSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_teacher(teacher)?;
    if calib.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    let mut student = teacher.clone();
    let masks = policy.build(&student)?;
    student.hard_mask(&masks)?;
    let prunable = student.prunable_indices();
    let per_layer = (cfg.iterations / prunable.len().max(1)).max(usize::from(cfg.iterations > 0));
    let mut cycler = BatchCycler::new(calib.len(), cfg.batch_size, derive_seed(cfg.seed, &[stage::TRAIN_SHUFFLE]));
    let mut history = Vec::new();
    let mut done = 0;
    for (p, &i) in prunable.iter().enumerate() {
        for it in 0..per_layer {
            let idx = cycler.next_indices();
            let (x, _) = calib.data.batch(&idx);
            let dense = teacher.forward(&x, None)?;
            let trace = student.forward(&x, Some(&masks))?;
            let target = dense.layer_output(i);
            let lg = layerwise_mse(target, trace.layer_output(i))?;
            let norm = target.numel() as f64;
            let grads = student.backward_span(&trace, i + 1, &lg.grad.scale(1.0 / norm), Some(&masks), false, i)?;
            let lr = cosine_lr(it, per_layer, cfg.lr);
            let layer = &mut student.layers_mut()[i];
            let gw = grads.layers[i].weight.as_ref().unwrap();
            let gb = grads.layers[i].bias.as_ref().unwrap();
            let m = masks.layer(p).data();
            for ((w, g), mk) in layer.weight.as_mut().unwrap().data_mut().iter_mut().zip(gw.data()).zip(m) {
                if *mk != 0.0 {
                    *w -= lr * (g + cfg.weight_decay * *w);
                }
            }
            sgd(layer.bias.as_mut().unwrap().data_mut(), gb.data(), None, lr, 0.0);
            done += 1;
            if cfg.log_every > 0 && done % cfg.log_every == 0 {
                history.push(MetricsRecord {
                    iteration: done,
                    loss: lg.loss / norm,
                    lr,
                    churn: 0.0,
                    sparsity: masks.global_sparsity(),
                    calib_accuracy: eval_accuracy(&student, &calib.data, Some(&masks), cfg.batch_size)?,
                });
            }
        }
    }
    let student = finish(student, masks.clone(), calib, cfg)?;
    Ok(TrainOutcome {
        student,
        masks,
        history,
        churn: Vec::new(),
    })
}

/// Dense supervised training used to manufacture teachers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            epochs: 6,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

/// Cross-entropy SGD on `data`; returns the network in eval mode.
pub fn train_teacher(mut net: Network, data: &Dataset, cfg: &TeacherConfig) -> Result<Network> {
    if data.is_empty() {
        return Err(Error::Empty("teacher training set"));
    }
    let steps_per_epoch = (data.len() / cfg.batch_size.max(1)).max(1);
    let total = steps_per_epoch * cfg.epochs;
    let tc = TrainConfig {
        iterations: total,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        alpha: 0.0,
        objective: Objective::CrossEntropy,
        ..TrainConfig::default()
    };
    tc.validate()?;
    net.set_mode(Mode::Train);
    let mut state = TrainState {
        masks: SparseMask::dense(&net),
        student: net,
        iteration: 0,
        lr: cfg.lr,
        velocity: None,
    };
    let policy = MaskPolicy::Rates(SparsityDistribution::new(vec![0.0; state.masks.len()], 0.0)?);
    let mut cycler = BatchCycler::new(data.len(), cfg.batch_size, derive_seed(cfg.seed, &[stage::TEACHER]));
    // dense masks never change; skip refreshes by refreshing only at the end
    let tc = TrainConfig { delta_t: total.max(1), ..tc };
    for _ in 0..total {
        let (x, y) = data.batch(&cycler.next_indices());
        step(&mut state, None, &x, &y, &policy, &tc, data.len())?;
    }
    let mut net = state.student;
    net.set_mode(Mode::Eval);
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_anchors() {
        assert_eq!(cosine_lr(0, 100, 0.1), 0.1);
        assert!(cosine_lr(100, 100, 0.1).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.1) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn eq6_single_entry() {
        let cfg = TrainConfig {
            alpha: 3e-5,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut w = [0.1, 0.1];
        update_weights(&mut w, &[0.2, 0.2], Some(&[0.0, 1.0]), None, 0.01, &cfg);
        assert_eq!(w[0], 0.097997);
        assert_eq!(w[1], 0.098);
    }
}
