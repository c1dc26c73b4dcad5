use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layer::LayerSpec;
use super::network::Network;
use crate::error::{Error, Result};

/// Built-in architectures.
///
/// * `mlp3`: `in → 256 → 128 → classes`, batch-norm and ReLU after each
///   hidden dense layer. Image inputs are flattened first.
/// * `convnet-small`: two `conv3x3 (pad 1) → BN → ReLU → avgpool2` blocks
///   with 8 and 16 channels, then a dense classifier.
pub const PRESETS: &[&str] = &["mlp3", "convnet-small"];

pub fn preset_specs(name: &str, in_shape: &[usize], classes: usize) -> Result<Vec<LayerSpec>> {
    match name {
        "mlp3" => {
            let mut specs = Vec::new();
            if in_shape.len() > 1 {
                specs.push(LayerSpec::Flatten);
            }
            let in_features = in_shape.iter().product();
            let dims = [in_features, 256, 128];
            for w in dims.windows(2) {
                specs.push(LayerSpec::Dense {
                    in_features: w[0],
                    out_features: w[1],
                });
                specs.push(LayerSpec::BatchNorm { features: w[1] });
                specs.push(LayerSpec::Relu);
            }
            specs.push(LayerSpec::Dense {
                in_features: 128,
                out_features: classes,
            });
            Ok(specs)
        }
        "convnet-small" => {
            let [c, h, w] = in_shape else {
                return Err(Error::Config(format!(
                    "convnet-small needs [channels, height, width] input, got {in_shape:?}"
                )));
            };
            let mut specs = Vec::new();
            let mut channels = *c;
            for out in [8, 16] {
                specs.extend([
                    LayerSpec::Conv2d {
                        in_channels: channels,
                        out_channels: out,
                        kernel: 3,
                        stride: 1,
                        padding: 1,
                    },
                    LayerSpec::BatchNorm { features: out },
                    LayerSpec::Relu,
                    LayerSpec::AvgPool { size: 2 },
                ]);
                channels = out;
            }
            specs.push(LayerSpec::Flatten);
            specs.push(LayerSpec::Dense {
                in_features: channels * (h / 4) * (w / 4),
                out_features: classes,
            });
            Ok(specs)
        }
        other => Err(Error::UnknownPreset(other.to_string())),
    }
}

/// Instantiates a preset with seeded fan-in-scaled initialization.
pub fn build_preset(name: &str, in_shape: &[usize], classes: usize, seed: u64) -> Result<Network> {
    let specs = preset_specs(name, in_shape, classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Network::new(in_shape.to_vec(), specs, &mut rng)
}
