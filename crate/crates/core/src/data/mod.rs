//! Datasets, calibration sampling and batching.

pub mod idx;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed::{rng_for, stage};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Shape(format!("{} inputs, {} labels", inputs.rows(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Shape(format!("label {bad} out of {classes} classes")));
        }
        Ok(Dataset { inputs, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample input shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (self.inputs.select_rows(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Inputs in consecutive chunks of `batch_size`, in stored order.
    pub fn input_batches(&self, batch_size: usize) -> impl Iterator<Item = Tensor> + '_ {
        let n = self.len();
        (0..n)
            .step_by(batch_size.max(1))
            .map(move |s| self.inputs.select_rows(&(s..(s + batch_size).min(n)).collect::<Vec<_>>()))
    }

    /// Standard deviation of each input channel (dimension 1 of the input
    /// tensor), over samples and spatial positions.
    pub fn channel_std(&self) -> Vec<f64> {
        let shape = self.inputs.shape();
        let channels = shape.get(1).copied().unwrap_or(1);
        let spatial: usize = shape.iter().skip(2).product();
        let x = self.inputs.data();
        let count = (self.len() * spatial) as f64;
        (0..channels)
            .map(|c| {
                let vals = || {
                    (0..self.len()).flat_map(move |s| {
                        let b = (s * channels + c) * spatial;
                        x[b..b + spatial].iter().copied()
                    })
                };
                let mean = vals().sum::<f64>() / count;
                (vals().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count).sqrt()
            })
            .collect()
    }

    fn row_keys(&self) -> HashSet<Vec<u64>> {
        (0..self.len())
            .map(|i| self.inputs.row(i).iter().map(|v| v.to_bits()).collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

/// Gaussian-blob images: each class is a few blobs at fixed nominal
/// positions; samples jitter the positions and amplitudes, add a random
/// distractor blob and pixel noise, and are quantized to multiples of 1/255.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
    /// Pixel noise standard deviation.
    pub noise: f64,
    /// Blob-centre jitter in pixels.
    pub jitter: f64,
    /// Random distractor blobs per image.
    pub distractors: usize,
    /// Upper bound of a distractor's amplitude.
    pub distractor_amp: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            height: 28,
            width: 28,
            train: 6000,
            test: 2000,
            seed: 0,
            noise: 0.15,
            jitter: 2.0,
            distractors: 2,
            distractor_amp: 0.6,
        }
    }
}

#[derive(Debug, Clone)]
struct Blob {
    y: f64,
    x: f64,
    sigma: f64,
    amp: f64,
}

const BLOBS_PER_CLASS: usize = 3;

impl SyntheticSpec {
    pub fn generate(&self) -> Result<Splits> {
        if self.classes < 2 || self.height < 4 || self.width < 4 {
            return Err(Error::Config("synthetic data needs ≥ 2 classes and ≥ 4×4 images".into()));
        }
        let mut proto_rng = rng_for(self.seed, &[stage::DATA, 0]);
        let span = |d: usize| {
            let margin = (d as f64 / 4.0).min(3.0);
            Uniform::new(margin, d as f64 - margin).unwrap()
        };
        let (cy, cx) = (span(self.height), span(self.width));
        let protos: Vec<Vec<Blob>> = (0..self.classes)
            .map(|_| {
                (0..BLOBS_PER_CLASS)
                    .map(|_| Blob {
                        y: cy.sample(&mut proto_rng),
                        x: cx.sample(&mut proto_rng),
                        sigma: proto_rng.random_range(1.5..3.0),
                        amp: proto_rng.random_range(0.6..1.0),
                    })
                    .collect()
            })
            .collect();
        let train = self.draw(&protos, self.train, 1)?;
        let test = self.draw(&protos, self.test, 2)?;
        Ok(Splits { train, test })
    }

    fn draw(&self, protos: &[Vec<Blob>], n: usize, stream: u64) -> Result<Dataset> {
        let mut rng = rng_for(self.seed, &[stage::DATA, stream]);
        let mut labels: Vec<usize> = (0..n).map(|i| i % self.classes).collect();
        labels.shuffle(&mut rng);
        let (h, w) = (self.height, self.width);
        let jitter = Normal::new(0.0, self.jitter.max(0.0)).unwrap();
        let noise = Normal::new(0.0, self.noise.max(0.0)).unwrap();
        let cy = Uniform::new(0.0, h as f64).unwrap();
        let cx = Uniform::new(0.0, w as f64).unwrap();
        let mut data = Vec::with_capacity(n * h * w);
        let mut img = vec![0.0; h * w];
        for &label in &labels {
            img.fill(0.0);
            let mut blobs: Vec<Blob> = protos[label]
                .iter()
                .map(|b| Blob {
                    y: b.y + jitter.sample(&mut rng),
                    x: b.x + jitter.sample(&mut rng),
                    sigma: b.sigma,
                    amp: b.amp * rng.random_range(0.7..1.3),
                })
                .collect();
            for _ in 0..self.distractors {
                blobs.push(Blob {
                    y: cy.sample(&mut rng),
                    x: cx.sample(&mut rng),
                    sigma: rng.random_range(1.5..3.0),
                    amp: rng.random::<f64>() * self.distractor_amp,
                });
            }
            for b in &blobs {
                let inv = 1.0 / (2.0 * b.sigma * b.sigma);
                for y in 0..h {
                    let dy = y as f64 - b.y;
                    for x in 0..w {
                        let dx = x as f64 - b.x;
                        img[y * w + x] += b.amp * (-(dy * dy + dx * dx) * inv).exp();
                    }
                }
            }
            for v in img.iter_mut() {
                let p = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
                *v = (p * 255.0).round() / 255.0;
            }
            data.extend_from_slice(&img);
        }
        Dataset::new(Tensor::new(vec![n, 1, h, w], data)?, labels, self.classes)
    }
}

/// Paths to an IDX image/label file pair with optional SHA-256 checksums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdxPair {
    pub images: PathBuf,
    pub labels: PathBuf,
    #[serde(default)]
    pub images_sha256: Option<String>,
    #[serde(default)]
    pub labels_sha256: Option<String>,
}

fn read_checked(path: &Path, sha: Option<&str>) -> Result<idx::IdxArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if let Some(expected) = sha {
        let got = hex::encode(Sha256::digest(&bytes));
        if !got.eq_ignore_ascii_case(expected) {
            return Err(Error::Checksum {
                path: path.to_path_buf(),
                expected: expected.to_string(),
                got,
            });
        }
    }
    idx::decode(&bytes)
}

/// Loads an image/label pair. Byte images are scaled to `[0, 1]`; 3-d image
/// arrays `[N, H, W]` gain a unit channel dimension.
pub fn load_idx_pair(pair: &IdxPair, classes: Option<usize>) -> Result<Dataset> {
    let images = read_checked(&pair.images, pair.images_sha256.as_deref())?;
    let labels = read_checked(&pair.labels, pair.labels_sha256.as_deref())?;
    if labels.dims.len() != 1 || labels.dims[0] != images.dims[0] {
        return Err(Error::format(
            "IDX pair",
            format!("{:?} images vs {:?} labels", images.dims, labels.dims),
        ));
    }
    let scale = if matches!(images.data, idx::IdxData::U8(_)) { 255.0 } else { 1.0 };
    let mut shape = images.dims.clone();
    if shape.len() == 3 {
        shape.insert(1, 1);
    }
    let inputs = Tensor::new(shape, images.data.to_f64().into_iter().map(|v| v / scale).collect())?;
    let labels: Vec<usize> = labels
        .data
        .to_f64()
        .into_iter()
        .map(|v| if v >= 0.0 { v as usize } else { usize::MAX })
        .collect();
    let classes = classes.unwrap_or_else(|| labels.iter().copied().filter(|&l| l != usize::MAX).max().map_or(0, |m| m + 1));
    Dataset::new(inputs, labels, classes)
}

/// Writes a dataset whose pixels are multiples of 1/255 as a `u8` IDX pair.
pub fn write_idx_pair(data: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let mut dims = data.inputs.shape().to_vec();
    if dims.len() == 4 && dims[1] == 1 {
        dims.remove(1);
    }
    let mut bytes = Vec::with_capacity(data.inputs.numel());
    for &v in data.inputs.data() {
        let q = (v * 255.0).round();
        if (q / 255.0 - v).abs() > 1e-12 || !(0.0..=255.0).contains(&q) {
            return Err(Error::format("IDX export", format!("pixel {v} is not a byte value")));
        }
        bytes.push(q as u8);
    }
    idx::write(images, &idx::IdxArray { dims, data: idx::IdxData::U8(bytes) })?;
    let lab: Result<Vec<u8>> = data
        .labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::format("IDX export", "label exceeds 255")))
        .collect();
    idx::write(labels, &idx::IdxArray { dims: vec![data.len()], data: idx::IdxData::U8(lab?) })
}

/// The only data available to post-training pruning: a small labeled
/// sample of the training split, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub data: Dataset,
    /// Row indices into the training split.
    pub indices: Vec<usize>,
}

impl CalibrationSet {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    ClassBalanced,
    Uniform,
}

/// Draws `size` training samples. Class-balanced sampling takes an equal
/// share per class (remainder to the lowest class ids) and tops up from the
/// remaining pool when a class runs short.
pub fn sample_calibration(train: &Dataset, size: usize, sampling: Sampling, seed: u64) -> Result<CalibrationSet> {
    if size == 0 || train.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    let size = size.min(train.len());
    let mut rng = rng_for(seed, &[stage::CALIBRATION]);
    let mut picked: Vec<usize> = match sampling {
        Sampling::Uniform => {
            let mut all: Vec<usize> = (0..train.len()).collect();
            all.shuffle(&mut rng);
            all.truncate(size);
            all
        }
        Sampling::ClassBalanced => {
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); train.classes];
            for (i, &l) in train.labels.iter().enumerate() {
                by_class[l].push(i);
            }
            for v in by_class.iter_mut() {
                v.shuffle(&mut rng);
            }
            let k = train.classes;
            let mut picked = Vec::with_capacity(size);
            let mut leftovers = Vec::new();
            for (c, v) in by_class.iter().enumerate() {
                let want = size / k + usize::from(c < size % k);
                let take = want.min(v.len());
                picked.extend_from_slice(&v[..take]);
                leftovers.extend_from_slice(&v[take..]);
            }
            leftovers.shuffle(&mut rng);
            let short = size - picked.len();
            picked.extend_from_slice(&leftovers[..short]);
            picked
        }
    };
    picked.shuffle(&mut rng);
    Ok(CalibrationSet {
        data: train.subset(&picked),
        indices: picked,
    })
}

/// Fails when any calibration input also appears in the evaluation split.
pub fn assert_disjoint(calib: &CalibrationSet, eval: &Dataset) -> Result<()> {
    let keys = calib.data.row_keys();
    for i in 0..eval.len() {
        let k: Vec<u64> = eval.inputs.row(i).iter().map(|v| v.to_bits()).collect();
        if keys.contains(&k) {
            return Err(Error::Config(format!("evaluation sample {i} also appears in the calibration set")));
        }
    }
    Ok(())
}

/// Cycles through a dataset in minibatches, reshuffling at every epoch
/// boundary from a seeded stream.
#[derive(Debug, Clone)]
pub struct BatchCycler {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    batch_size: usize,
    seed: u64,
}

impl BatchCycler {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Self {
        let mut c = BatchCycler {
            order: (0..len).collect(),
            pos: 0,
            epoch: 0,
            batch_size: batch_size.clamp(1, len.max(1)),
            seed,
        };
        c.shuffle();
        c
    }

    fn shuffle(&mut self) {
        let mut rng = rng_for(self.seed, &[stage::TRAIN_SHUFFLE, self.epoch]);
        self.order.sort_unstable();
        self.order.shuffle(&mut rng);
    }

    /// Indices of the next batch. A batch never straddles an epoch boundary;
    /// the short tail of an epoch is dropped.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos + self.batch_size > self.order.len() {
            self.epoch += 1;
            self.pos = 0;
            self.shuffle();
        }
        let out = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        out
    }
}
