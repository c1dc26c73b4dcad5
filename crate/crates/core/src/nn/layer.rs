use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The fixed layer menu. Shapes are per sample, without the batch dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        features: usize,
    },
    Relu,
    Flatten,
    AvgPool {
        size: usize,
    },
}

impl LayerSpec {
    pub fn is_prunable(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::AvgPool { .. } => "avgpool",
        }
    }

    /// Shape of the weight tensor (gamma for batch-norm), if any.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => Some(vec![out_features, in_features]),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some(vec![out_channels, in_channels, kernel, kernel]),
            LayerSpec::BatchNorm { features } => Some(vec![features]),
            _ => None,
        }
    }

    pub fn bias_len(&self) -> Option<usize> {
        match *self {
            LayerSpec::Dense { out_features, .. } => Some(out_features),
            LayerSpec::Conv2d { out_channels, .. } => Some(out_channels),
            LayerSpec::BatchNorm { features } => Some(features),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |why: &str| Error::Shape(format!("{} cannot take input {input:?}: {why}", self.name()));
        match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                if input != [in_features] {
                    return Err(bad("feature count"));
                }
                Ok(vec![out_features])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(bad("expects [channels, height, width]"));
                }
                if stride == 0 || input[1] + 2 * padding < kernel || input[2] + 2 * padding < kernel {
                    return Err(bad("kernel larger than padded input"));
                }
                Ok(vec![
                    out_channels,
                    (input[1] + 2 * padding - kernel) / stride + 1,
                    (input[2] + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerSpec::BatchNorm { features } => {
                if input.first() != Some(&features) || !(input.len() == 1 || input.len() == 3) {
                    return Err(bad("channel count"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::AvgPool { size } => {
                if input.len() != 3 || size == 0 || input[1] < size || input[2] < size {
                    return Err(bad("expects [channels, height, width] at least the pool size"));
                }
                Ok(vec![input[0], input[1] / size, input[2] / size])
            }
        }
    }

    pub(crate) fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { in_features, .. } => in_features,
            LayerSpec::Conv2d {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            _ => 0,
        }
    }
}

/// Batch-norm running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn identity(features: usize) -> Self {
        BnStats {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }
}

/// A layer and its parameters. For batch-norm, `weight` is the scale and
/// `bias` the shift.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
    pub stats: Option<BnStats>,
}

impl Layer {
    /// Fresh parameters: He-uniform weights scaled by fan-in, zero biases,
    /// identity batch-norm.
    pub fn init(spec: LayerSpec, rng: &mut impl Rng) -> Self {
        match spec {
            LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                let shape = spec.weight_shape().unwrap();
                let bound = (6.0 / spec.fan_in() as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).unwrap();
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| dist.sample(rng)).collect();
                let bias = Tensor::zeros(&[spec.bias_len().unwrap()]);
                Layer {
                    weight: Some(Tensor::new(shape, data).unwrap()),
                    bias: Some(bias),
                    stats: None,
                    spec,
                }
            }
            LayerSpec::BatchNorm { features } => Layer {
                weight: Some(Tensor::ones(&[features])),
                bias: Some(Tensor::zeros(&[features])),
                stats: Some(BnStats::identity(features)),
                spec,
            },
            _ => Layer {
                spec,
                weight: None,
                bias: None,
                stats: None,
            },
        }
    }
}
