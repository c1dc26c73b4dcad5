//! Small random networks and datasets shared by the integration tests.

use ptskit_core::data::{CalibrationSet, Dataset};
use ptskit_core::nn::{Layer, LayerSpec, Mode, Network};
use ptskit_core::sparsity::SparseMask;
use ptskit_core::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Architectures used by the randomized tests, all under 1k parameters.
#[derive(Debug, Clone, Copy)]
pub enum Arch {
    /// Dense → ReLU → Dense.
    Mlp,
    /// Dense → BN → ReLU → Dense.
    MlpBn,
    /// Conv → BN → ReLU → AvgPool → Flatten → Dense.
    Conv,
    /// Strided conv without padding → ReLU → Flatten → Dense.
    ConvStrided,
}

pub const ARCHS: [Arch; 4] = [Arch::Mlp, Arch::MlpBn, Arch::Conv, Arch::ConvStrided];

pub fn arch_specs(arch: Arch) -> (Vec<usize>, Vec<LayerSpec>) {
    use LayerSpec::*;
    match arch {
        Arch::Mlp => (
            vec![6],
            vec![Dense { in_features: 6, out_features: 10 }, Relu, Dense { in_features: 10, out_features: 3 }],
        ),
        Arch::MlpBn => (
            vec![5],
            vec![
                Dense { in_features: 5, out_features: 8 },
                BatchNorm { features: 8 },
                Relu,
                Dense { in_features: 8, out_features: 4 },
            ],
        ),
        Arch::Conv => (
            vec![2, 6, 6],
            vec![
                Conv2d { in_channels: 2, out_channels: 3, kernel: 3, stride: 1, padding: 1 },
                BatchNorm { features: 3 },
                Relu,
                AvgPool { size: 2 },
                Flatten,
                Dense { in_features: 27, out_features: 3 },
            ],
        ),
        Arch::ConvStrided => (
            vec![1, 7, 7],
            vec![
                Conv2d { in_channels: 1, out_channels: 2, kernel: 3, stride: 2, padding: 0 },
                Relu,
                Flatten,
                Dense { in_features: 18, out_features: 3 },
            ],
        ),
    }
}

/// Random network with randomized biases, BN affine parameters and BN
/// statistics, so no parameter sits at a special value.
pub fn random_net(arch: Arch, seed: u64) -> Network {
    let mut r = rng(seed);
    let (shape, specs) = arch_specs(arch);
    let mut net = Network::new(shape, specs, &mut r).unwrap();
    for layer in net.layers_mut() {
        randomize(layer, &mut r);
    }
    net
}

fn randomize(layer: &mut Layer, r: &mut impl Rng) {
    if let Some(b) = layer.bias.as_mut() {
        for v in b.data_mut() {
            *v = 0.3 * r.sample::<f64, _>(StandardNormal);
        }
    }
    if let (LayerSpec::BatchNorm { .. }, Some(w)) = (&layer.spec, layer.weight.as_mut()) {
        for v in w.data_mut() {
            *v = r.random_range(0.5..1.5);
        }
    }
    if let Some(s) = layer.stats.as_mut() {
        for v in s.mean.iter_mut() {
            *v = 0.2 * r.sample::<f64, _>(StandardNormal);
        }
        for v in s.var.iter_mut() {
            *v = r.random_range(0.5..2.0);
        }
    }
}

pub fn random_batch(net: &Network, rows: usize, r: &mut impl Rng) -> Tensor {
    let mut shape = vec![rows];
    shape.extend_from_slice(net.input_shape());
    normal_tensor(&shape, r)
}

pub fn random_masks(net: &Network, keep: f64, r: &mut impl Rng) -> SparseMask {
    let layers = net
        .prunable_weights()
        .iter()
        .map(|w| {
            let bits = (0..w.numel()).map(|_| if r.random::<f64>() < keep { 1.0 } else { 0.0 }).collect();
            Tensor::new(w.shape().to_vec(), bits).unwrap()
        })
        .collect();
    SparseMask::new(layers).unwrap()
}

pub fn eval_mode(mut net: Network) -> Network {
    net.set_mode(Mode::Eval);
    net
}

/// Random labeled dataset whose labels come from a random linear teacher,
/// so it is learnable.
pub fn random_dataset(sample_shape: &[usize], rows: usize, classes: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let mut shape = vec![rows];
    shape.extend_from_slice(sample_shape);
    let x = normal_tensor(&shape, &mut r);
    let d = x.row_len();
    let proj = normal_tensor(&[classes, d], &mut r);
    let labels = (0..rows)
        .map(|i| {
            let row = x.row(i);
            (0..classes)
                .map(|c| (c, proj.row(c).iter().zip(row).map(|(a, b)| a * b).sum::<f64>()))
                .fold((0, f64::NEG_INFINITY), |best, (c, v)| if v > best.1 { (c, v) } else { best })
                .0
        })
        .collect();
    Dataset::new(x, labels, classes).unwrap()
}

pub fn calibration(data: Dataset) -> CalibrationSet {
    CalibrationSet {
        indices: (0..data.len()).collect(),
        data,
    }
}

/// Sum of `coef ⊙ logits`: a scalar loss whose logit gradient is `coef`.
pub fn linear_loss(logits: &Tensor, coef: &Tensor) -> f64 {
    logits.data().iter().zip(coef.data()).map(|(a, b)| a * b).sum()
}
