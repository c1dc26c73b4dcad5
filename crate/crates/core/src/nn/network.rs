use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::conv::{self, ConvGeom};
use super::layer::{BnStats, Layer, LayerSpec};
use crate::error::{Error, Result};
use crate::sparsity::SparseMask;
use crate::tensor::{gemm, Tensor};

/// Added to the variance when normalizing; never stored.
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Batch-norm normalizes with batch statistics.
    Train,
    /// Batch-norm normalizes with stored statistics.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    mode: Mode,
}

#[derive(Debug, Clone)]
enum Cache {
    None,
    Dense {
        weight: Tensor,
    },
    Conv {
        weight: Tensor,
        cols: Vec<f64>,
        geom: ConvGeom,
    },
    BatchNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        /// Present when the batch was normalized with its own statistics.
        batch: Option<BnStats>,
    },
}

/// Everything [`Network::backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    specs: Vec<LayerSpec>,
    inputs: Vec<Tensor>,
    caches: Vec<Cache>,
    logits: Tensor,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn into_logits(self) -> Tensor {
        self.logits
    }

    /// Input fed to layer `i`.
    pub fn layer_input(&self, i: usize) -> &Tensor {
        &self.inputs[i]
    }

    /// Output produced by layer `i`.
    pub fn layer_output(&self, i: usize) -> &Tensor {
        self.inputs.get(i + 1).unwrap_or(&self.logits)
    }

    /// Batch statistics observed at batch-norm layer `i` in train mode.
    pub fn batch_stats(&self, i: usize) -> Option<&BnStats> {
        match &self.caches[i] {
            Cache::BatchNorm { batch, .. } => batch.as_ref(),
            _ => None,
        }
    }
}

/// Parameter gradients, aligned with the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<ParamGrads>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    count: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn merge(self, other: Moments) -> Moments {
        if self.count == 0.0 {
            return other;
        }
        let count = self.count + other.count;
        let delta = other.mean - self.mean;
        Moments {
            count,
            mean: self.mean + delta * other.count / count,
            m2: self.m2 + other.m2 + delta * delta * self.count * other.count / count,
        }
    }
}

impl Network {
    /// Builds a network with freshly initialized parameters.
    pub fn new(input_shape: Vec<usize>, specs: Vec<LayerSpec>, rng: &mut impl Rng) -> Result<Self> {
        let layers = specs.into_iter().map(|s| Layer::init(s, rng)).collect();
        Self::from_layers(input_shape, layers, Mode::Eval)
    }

    /// Assembles a network from existing layers, checking every shape.
    pub fn from_layers(input_shape: Vec<usize>, layers: Vec<Layer>, mode: Mode) -> Result<Self> {
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            let spec = &layer.spec;
            shape = spec.output_shape(&shape).map_err(|e| Error::Layer {
                layer: i,
                detail: e.to_string(),
            })?;
            let check = |t: &Option<Tensor>, want: Option<Vec<usize>>| -> Result<()> {
                let got = t.as_ref().map(|t| t.shape().to_vec());
                if got != want {
                    return Err(Error::LayerShape {
                        layer: i,
                        expected: want.unwrap_or_default(),
                        got: got.unwrap_or_default(),
                    });
                }
                Ok(())
            };
            check(&layer.weight, spec.weight_shape())?;
            check(&layer.bias, spec.bias_len().map(|n| vec![n]))?;
            let want_stats = matches!(spec, LayerSpec::BatchNorm { .. });
            match (&layer.stats, spec) {
                (Some(s), LayerSpec::BatchNorm { features })
                    if s.mean.len() == *features && s.var.len() == *features => {}
                (None, _) if !want_stats => {}
                _ => {
                    return Err(Error::Shape(format!(
                        "layer {i}: batch-norm statistics do not match the layer"
                    )))
                }
            }
        }
        if shape.len() != 1 {
            return Err(Error::Shape(format!("network must end in a flat output, ends in {shape:?}")));
        }
        Ok(Network {
            input_shape,
            layers,
            mode,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable parameter access. Shapes must be preserved.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn num_classes(&self) -> usize {
        let mut shape = self.input_shape.clone();
        for l in &self.layers {
            shape = l.spec.output_shape(&shape).expect("validated at construction");
        }
        shape[0]
    }

    /// Layer indices of the Dense/Conv2d layers, in order.
    pub fn prunable_indices(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].spec.is_prunable())
            .collect()
    }

    pub fn prunable_weights(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .filter(|l| l.spec.is_prunable())
            .map(|l| l.weight.as_ref().unwrap())
            .collect()
    }

    pub fn prunable_numels(&self) -> Vec<usize> {
        self.prunable_weights().iter().map(|w| w.numel()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_ref().map_or(0, Tensor::numel) + l.bias.as_ref().map_or(0, Tensor::numel))
            .sum()
    }

    /// Mask lookup keyed by layer index.
    fn layer_masks<'m>(&self, masks: Option<&'m SparseMask>) -> Result<Vec<Option<&'m Tensor>>> {
        let mut out = vec![None; self.layers.len()];
        let Some(masks) = masks else { return Ok(out) };
        let prunable = self.prunable_indices();
        if masks.len() != prunable.len() {
            return Err(Error::Shape(format!(
                "{} masks for {} prunable layers",
                masks.len(),
                prunable.len()
            )));
        }
        for (p, &i) in prunable.iter().enumerate() {
            let m = masks.layer(p);
            let w = self.layers[i].weight.as_ref().unwrap();
            if m.shape() != w.shape() {
                return Err(Error::MaskShape {
                    layer: i,
                    expected: w.shape().to_vec(),
                    got: m.shape().to_vec(),
                });
            }
            out[i] = Some(m);
        }
        Ok(out)
    }

    /// Runs a batch through the network. Prunable layers compute with
    /// `W ⊙ M` when a mask is given.
    pub fn forward(&self, batch: &Tensor, masks: Option<&SparseMask>) -> Result<ForwardTrace> {
        if batch.shape().len() != self.input_shape.len() + 1 || batch.shape()[1..] != self.input_shape[..] {
            let mut expected = vec![batch.rows()];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::LayerShape {
                layer: 0,
                expected,
                got: batch.shape().to_vec(),
            });
        }
        let masks = self.layer_masks(masks)?;
        let n = batch.rows();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, cache) = self.layer_forward(layer, &x, n, masks[i])?;
            inputs.push(x);
            caches.push(cache);
            x = y;
        }
        Ok(ForwardTrace {
            specs: self.specs(),
            inputs,
            caches,
            logits: x,
        })
    }

    /// Forward pass keeping only the logits.
    pub fn logits(&self, batch: &Tensor, masks: Option<&SparseMask>) -> Result<Tensor> {
        Ok(self.forward(batch, masks)?.into_logits())
    }

    fn layer_forward(&self, layer: &Layer, x: &Tensor, n: usize, mask: Option<&Tensor>) -> Result<(Tensor, Cache)> {
        let effective = |w: &Tensor| match mask {
            Some(m) => crate::sparsity::apply_mask(w, m).expect("mask shape checked"),
            None => w.clone(),
        };
        Ok(match layer.spec {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                let w = effective(layer.weight.as_ref().unwrap());
                let b = layer.bias.as_ref().unwrap().data();
                let mut y = vec![0.0; n * out_features];
                for row in y.chunks_mut(out_features) {
                    row.copy_from_slice(b);
                }
                gemm(n, in_features, out_features, x.data(), false, w.data(), true, &mut y, true);
                (Tensor::new(vec![n, out_features], y)?, Cache::Dense { weight: w })
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let s = x.shape();
                let out = layer.spec.output_shape(&s[1..])?;
                let geom = ConvGeom {
                    channels: in_channels,
                    height: s[2],
                    width: s[3],
                    kernel,
                    stride,
                    padding,
                    out_h: out[1],
                    out_w: out[2],
                };
                let w = effective(layer.weight.as_ref().unwrap());
                let cols = conv::im2col(x.data(), n, &geom);
                let np = n * geom.p();
                let mut yc = vec![0.0; out_channels * np];
                for (row, &b) in yc.chunks_mut(np).zip(layer.bias.as_ref().unwrap().data()) {
                    row.fill(b);
                }
                gemm(out_channels, geom.k(), np, w.data(), false, &cols, false, &mut yc, true);
                let y = conv::channel_to_sample_major(&yc, n, out_channels, geom.p());
                (
                    Tensor::new(vec![n, out[0], out[1], out[2]], y)?,
                    Cache::Conv { weight: w, cols, geom },
                )
            }
            LayerSpec::BatchNorm { features } => {
                let spatial = x.row_len() / features;
                let (mean, var, batch) = match self.mode {
                    Mode::Eval => {
                        let s = layer.stats.as_ref().unwrap();
                        (s.mean.clone(), s.var.clone(), None)
                    }
                    Mode::Train => {
                        let st = channel_moments(x.data(), n, features, spatial);
                        let mean: Vec<f64> = st.iter().map(|m| m.mean).collect();
                        let var: Vec<f64> = st.iter().map(|m| m.m2 / m.count).collect();
                        let batch = BnStats {
                            mean: mean.clone(),
                            var: var.clone(),
                        };
                        (mean, var, Some(batch))
                    }
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let gamma = layer.weight.as_ref().unwrap().data();
                let beta = layer.bias.as_ref().unwrap().data();
                let mut xhat = vec![0.0; x.numel()];
                let mut y = vec![0.0; x.numel()];
                for s in 0..n {
                    for c in 0..features {
                        let base = (s * features + c) * spatial;
                        for k in base..base + spatial {
                            let h = (x.data()[k] - mean[c]) * inv_std[c];
                            xhat[k] = h;
                            y[k] = gamma[c] * h + beta[c];
                        }
                    }
                }
                (
                    Tensor::new(x.shape().to_vec(), y)?,
                    Cache::BatchNorm { xhat, inv_std, batch },
                )
            }
            LayerSpec::Relu => (x.map(|v| v.max(0.0)), Cache::None),
            LayerSpec::Flatten => (x.clone().reshape(vec![n, x.row_len()])?, Cache::None),
            LayerSpec::AvgPool { size } => {
                let s = x.shape();
                let (c, h, w) = (s[1], s[2], s[3]);
                let (oh, ow) = (h / size, w / size);
                let norm = 1.0 / (size * size) as f64;
                let mut y = vec![0.0; n * c * oh * ow];
                for plane in 0..n * c {
                    let src = &x.data()[plane * h * w..(plane + 1) * h * w];
                    let dst = &mut y[plane * oh * ow..(plane + 1) * oh * ow];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for dy in 0..size {
                                for dx in 0..size {
                                    acc += src[(oy * size + dy) * w + ox * size + dx];
                                }
                            }
                            dst[oy * ow + ox] = acc * norm;
                        }
                    }
                }
                (Tensor::new(vec![n, c, oh, ow], y)?, Cache::None)
            }
        })
    }

    /// Gradients of a scalar loss given its gradient with respect to the
    /// logits. With `ste` the mask is treated as identity on the way back, so
    /// every weight entry receives a gradient; otherwise masked-out entries
    /// get exactly zero.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_logits: &Tensor,
        masks: Option<&SparseMask>,
        ste: bool,
    ) -> Result<Gradients> {
        self.backward_span(trace, self.layers.len(), grad_logits, masks, ste, 0)
    }

    /// Backpropagates `grad_out`, the gradient with respect to the output of
    /// layer `end - 1`, down to layer `start`. Layers outside the span get
    /// empty gradients.
    pub fn backward_span(
        &self,
        trace: &ForwardTrace,
        end: usize,
        grad_out: &Tensor,
        masks: Option<&SparseMask>,
        ste: bool,
        start: usize,
    ) -> Result<Gradients> {
        if trace.specs.len() != self.layers.len()
            || trace.specs.iter().zip(&self.layers).any(|(s, l)| *s != l.spec)
        {
            return Err(Error::TraceMismatch("layer specs differ".into()));
        }
        if end == 0 || end > self.layers.len() || start >= end {
            return Err(Error::TraceMismatch(format!("invalid span {start}..{end}")));
        }
        if grad_out.shape() != trace.layer_output(end - 1).shape() {
            return Err(Error::TraceMismatch(format!(
                "gradient shape {:?} does not match layer output {:?}",
                grad_out.shape(),
                trace.layer_output(end - 1).shape()
            )));
        }
        let masks = self.layer_masks(masks)?;
        let mut grads: Vec<ParamGrads> = self
            .layers
            .iter()
            .map(|_| ParamGrads {
                weight: None,
                bias: None,
            })
            .collect();
        let mut g = grad_out.clone();
        for i in (start..end).rev() {
            let need_input = i > start;
            let (gx, pg) = self.layer_backward(i, trace, &g, need_input)?;
            let mut pg = pg;
            if let (Some(m), false, Some(w)) = (masks[i], ste, pg.weight.as_mut()) {
                for (gw, &mk) in w.data_mut().iter_mut().zip(m.data()) {
                    *gw *= mk;
                }
            }
            grads[i] = pg;
            if let Some(gx) = gx {
                g = gx;
            }
        }
        Ok(Gradients { layers: grads })
    }

    fn layer_backward(
        &self,
        i: usize,
        trace: &ForwardTrace,
        g: &Tensor,
        need_input: bool,
    ) -> Result<(Option<Tensor>, ParamGrads)> {
        let layer = &self.layers[i];
        let x = &trace.inputs[i];
        let n = x.rows();
        let none = ParamGrads {
            weight: None,
            bias: None,
        };
        Ok(match (&layer.spec, &trace.caches[i]) {
            (
                &LayerSpec::Dense {
                    in_features,
                    out_features,
                },
                Cache::Dense { weight },
            ) => {
                let mut gw = vec![0.0; out_features * in_features];
                gemm(out_features, n, in_features, g.data(), true, x.data(), false, &mut gw, false);
                let mut gb = vec![0.0; out_features];
                for row in g.data().chunks(out_features) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                let gx = need_input
                    .then(|| {
                        let mut gx = vec![0.0; n * in_features];
                        gemm(n, out_features, in_features, g.data(), false, weight.data(), false, &mut gx, false);
                        Tensor::new(x.shape().to_vec(), gx)
                    })
                    .transpose()?;
                (
                    gx,
                    ParamGrads {
                        weight: Some(Tensor::new(vec![out_features, in_features], gw)?),
                        bias: Some(Tensor::from_vec(gb)),
                    },
                )
            }
            (&LayerSpec::Conv2d { out_channels, .. }, Cache::Conv { weight, cols, geom }) => {
                let (k, p) = (geom.k(), geom.p());
                let np = n * p;
                let gc = conv::sample_to_channel_major(g.data(), n, out_channels, p);
                let mut gw = vec![0.0; out_channels * k];
                gemm(out_channels, np, k, &gc, false, cols, true, &mut gw, false);
                let gb: Vec<f64> = gc.chunks(np).map(|r| r.iter().sum()).collect();
                let gx = need_input
                    .then(|| {
                        let mut gcols = vec![0.0; k * np];
                        gemm(k, out_channels, np, weight.data(), true, &gc, false, &mut gcols, false);
                        Tensor::new(x.shape().to_vec(), conv::col2im(&gcols, n, geom))
                    })
                    .transpose()?;
                (
                    gx,
                    ParamGrads {
                        weight: Some(Tensor::new(weight.shape().to_vec(), gw)?),
                        bias: Some(Tensor::from_vec(gb)),
                    },
                )
            }
            (&LayerSpec::BatchNorm { features }, Cache::BatchNorm { xhat, inv_std, batch }) => {
                let spatial = x.row_len() / features;
                let gamma = layer.weight.as_ref().unwrap().data();
                let mut gg = vec![0.0; features];
                let mut gbeta = vec![0.0; features];
                for s in 0..n {
                    for c in 0..features {
                        let base = (s * features + c) * spatial;
                        for k in base..base + spatial {
                            gg[c] += g.data()[k] * xhat[k];
                            gbeta[c] += g.data()[k];
                        }
                    }
                }
                let gx = need_input.then(|| {
                    let mut gx = vec![0.0; x.numel()];
                    let m = (n * spatial) as f64;
                    for s in 0..n {
                        for c in 0..features {
                            let base = (s * features + c) * spatial;
                            for k in base..base + spatial {
                                let dxhat = g.data()[k] * gamma[c];
                                gx[k] = if batch.is_some() {
                                    // dxhat_sum = gbeta·γ, dxhat·xhat sum = gg·γ
                                    inv_std[c] / m * (m * dxhat - gbeta[c] * gamma[c] - xhat[k] * gg[c] * gamma[c])
                                } else {
                                    dxhat * inv_std[c]
                                };
                            }
                        }
                    }
                    Tensor::new(x.shape().to_vec(), gx).unwrap()
                });
                (
                    gx,
                    ParamGrads {
                        weight: Some(Tensor::from_vec(gg)),
                        bias: Some(Tensor::from_vec(gbeta)),
                    },
                )
            }
            (LayerSpec::Relu, _) => (
                need_input.then(|| x.zip_map(g, |xv, gv| if xv > 0.0 { gv } else { 0.0 }).unwrap()),
                none,
            ),
            (LayerSpec::Flatten, _) => (
                need_input
                    .then(|| g.clone().reshape(x.shape().to_vec()))
                    .transpose()?,
                none,
            ),
            (&LayerSpec::AvgPool { size }, _) => {
                let gx = need_input.then(|| {
                    let s = x.shape();
                    let (c, h, w) = (s[1], s[2], s[3]);
                    let (oh, ow) = (h / size, w / size);
                    let norm = 1.0 / (size * size) as f64;
                    let mut gx = vec![0.0; x.numel()];
                    for plane in 0..n * c {
                        let src = &g.data()[plane * oh * ow..(plane + 1) * oh * ow];
                        let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let v = src[oy * ow + ox] * norm;
                                for dy in 0..size {
                                    for dx in 0..size {
                                        dst[(oy * size + dy) * w + ox * size + dx] = v;
                                    }
                                }
                            }
                        }
                    }
                    Tensor::new(x.shape().to_vec(), gx).unwrap()
                });
                (gx, none)
            }
            _ => return Err(Error::TraceMismatch(format!("cache at layer {i} does not match its spec"))),
        })
    }

    /// Folds the batch statistics of a train-mode trace into the stored
    /// statistics: `stored ← (1 − momentum)·stored + momentum·batch`.
    pub fn absorb_batch_stats(&mut self, trace: &ForwardTrace, momentum: f64) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let (Some(stats), Some(batch)) = (layer.stats.as_mut(), trace.batch_stats(i)) {
                for (s, b) in stats.mean.iter_mut().zip(&batch.mean) {
                    *s = (1.0 - momentum) * *s + momentum * b;
                }
                for (s, b) in stats.var.iter_mut().zip(&batch.var) {
                    *s = (1.0 - momentum) * *s + momentum * b;
                }
            }
        }
    }

    /// Replaces every batch-norm layer's statistics with the exact mean and
    /// (population) variance of its input over all streamed batches. Batches
    /// are pushed through with batch statistics, and per-batch moments are
    /// merged in stream order, so the result depends only on the stream.
    pub fn bn_recalibrate<I>(&mut self, batches: I, masks: Option<&SparseMask>) -> Result<()>
    where
        I: IntoIterator<Item = Tensor>,
    {
        let saved = self.mode;
        self.mode = Mode::Train;
        let result = self.collect_moments(batches, masks);
        self.mode = saved;
        let moments = result?;
        for (layer, m) in self.layers.iter_mut().zip(moments) {
            if let (Some(stats), Some(m)) = (layer.stats.as_mut(), m) {
                stats.mean = m.iter().map(|x| x.mean).collect();
                stats.var = m.iter().map(|x| x.m2 / x.count).collect();
            }
        }
        Ok(())
    }

    fn collect_moments<I>(&self, batches: I, masks: Option<&SparseMask>) -> Result<Vec<Option<Vec<Moments>>>>
    where
        I: IntoIterator<Item = Tensor>,
    {
        let mut acc: Vec<Option<Vec<Moments>>> = self
            .layers
            .iter()
            .map(|l| match l.spec {
                LayerSpec::BatchNorm { features } => Some(vec![Moments::default(); features]),
                _ => None,
            })
            .collect();
        let mut seen = false;
        for batch in batches {
            seen = true;
            let trace = self.forward(&batch, masks)?;
            for (i, slot) in acc.iter_mut().enumerate() {
                if let Some(slot) = slot {
                    let x = trace.layer_input(i);
                    let features = slot.len();
                    let m = channel_moments(x.data(), x.rows(), features, x.row_len() / features);
                    for (a, b) in slot.iter_mut().zip(m) {
                        *a = a.merge(b);
                    }
                }
            }
        }
        if !seen {
            return Err(Error::Empty("batch-norm recalibration stream"));
        }
        Ok(acc)
    }

    /// Destructively zeroes every weight outside the mask.
    pub fn hard_mask(&mut self, masks: &SparseMask) -> Result<()> {
        let masks: Vec<Option<Tensor>> = self.layer_masks(Some(masks))?.into_iter().map(|m| m.cloned()).collect();
        for (layer, m) in self.layers.iter_mut().zip(masks) {
            if let (Some(m), Some(w)) = (m, layer.weight.as_mut()) {
                *w = crate::sparsity::apply_mask(w, &m)?;
            }
        }
        Ok(())
    }

    /// Top-1 accuracy over `inputs`, evaluated in chunks of `batch_size`.
    pub fn accuracy(&self, inputs: &Tensor, labels: &[usize], masks: Option<&SparseMask>, batch_size: usize) -> Result<f64> {
        if inputs.rows() != labels.len() {
            return Err(Error::Shape(format!("{} inputs, {} labels", inputs.rows(), labels.len())));
        }
        if labels.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        let mut correct = 0usize;
        let idx: Vec<usize> = (0..labels.len()).collect();
        for chunk in idx.chunks(batch_size.max(1)) {
            let logits = self.logits(&inputs.select_rows(chunk), masks)?;
            correct += logits
                .argmax_rows()
                .iter()
                .zip(chunk)
                .filter(|(p, &i)| **p == labels[i])
                .count();
        }
        Ok(correct as f64 / labels.len() as f64)
    }

    /// SHA-256 over the architecture, every parameter and the batch-norm
    /// statistics.
    pub fn param_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.specs()).unwrap());
        for l in &self.layers {
            for t in [&l.weight, &l.bias].into_iter().flatten() {
                h.update(t.to_le_bytes());
            }
            if let Some(s) = &l.stats {
                for v in s.mean.iter().chain(&s.var) {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

fn channel_moments(x: &[f64], n: usize, features: usize, spatial: usize) -> Vec<Moments> {
    (0..features)
        .map(|c| {
            let count = (n * spatial) as f64;
            let mut sum = 0.0;
            for s in 0..n {
                let base = (s * features + c) * spatial;
                sum += x[base..base + spatial].iter().sum::<f64>();
            }
            let mean = sum / count;
            let mut m2 = 0.0;
            for s in 0..n {
                let base = (s * features + c) * spatial;
                m2 += x[base..base + spatial].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
            }
            Moments { count, mean, m2 }
        })
        .collect()
}
