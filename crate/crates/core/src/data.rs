//! Image classification datasets: CIFAR-10 binary files and seeded
//! synthetic sets.

use std::path::Path;

use chanprune_tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::netzoo::InputShape;
use crate::{Error, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_CLASSES: usize = 10;

/// NHWC images stored as `f32` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub shape: InputShape,
    pub num_classes: usize,
    images: Vec<f32>,
    labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
}

impl Dataset {
    pub fn new(shape: InputShape, num_classes: usize, images: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        let per = shape.height * shape.width * shape.channels;
        if images.len() != per * labels.len() {
            return Err(Error::Dataset(format!(
                "{} pixel values for {} images of {per}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Dataset(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self {
            shape,
            num_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn pixels(&self) -> usize {
        self.shape.height * self.shape.width * self.shape.channels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.pixels();
        &self.images[i * n..(i + 1) * n]
    }

    /// Batch tensor and labels for the given sample indices.
    pub fn batch<S: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<S>, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * self.pixels());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| S::lit(v as f64)));
        }
        let s = self.shape;
        let t = Tensor::new(&[indices.len(), s.height, s.width, s.channels], data)?;
        Ok((t, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.pixels());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Self {
            shape: self.shape,
            num_classes: self.num_classes,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Per-channel mean and standard deviation.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.shape.channels;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for px in self.images.chunks_exact(c) {
            for j in 0..c {
                sum[j] += px[j] as f64;
                sq[j] += (px[j] as f64).powi(2);
            }
        }
        let n = (self.images.len() / c).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-8))
            .collect();
        (mean, std)
    }

    pub fn normalize_with(&mut self, mean: &[f64], std: &[f64]) {
        let c = self.shape.channels;
        for px in self.images.chunks_exact_mut(c) {
            for j in 0..c {
                px[j] = ((px[j] as f64 - mean[j]) / std[j]) as f32;
            }
        }
    }

    /// Seeded train/val split; both halves are normalized with the train
    /// statistics.
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<Split> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::Config(format!("val fraction {val_fraction} outside [0, 1)")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = (self.len() as f64 * val_fraction).round() as usize;
        if n_val == 0 || n_val == self.len() {
            return Err(Error::Config(format!(
                "split of {} samples at {val_fraction} leaves an empty side",
                self.len()
            )));
        }
        let (val_idx, train_idx) = idx.split_at(n_val);
        let mut train = self.subset(train_idx);
        let mut val = self.subset(val_idx);
        let (mean, std) = train.channel_stats();
        train.normalize_with(&mean, &std);
        val.normalize_with(&mean, &std);
        Ok(Split { train, val })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub classes: usize,
    pub samples: usize,
    pub seed: u64,
    /// Per-pixel Gaussian noise standard deviation.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Sinusoid components per class template.
    #[serde(default = "default_components")]
    pub components: usize,
    /// Spatial jitter of each sample relative to its template, in pixels.
    #[serde(default = "default_shift")]
    pub max_shift: usize,
}

fn default_side() -> usize {
    8
}
fn default_channels() -> usize {
    3
}
fn default_noise() -> f64 {
    0.6
}
fn default_components() -> usize {
    3
}
fn default_shift() -> usize {
    1
}

impl SyntheticSpec {
    pub fn new(classes: usize, samples: usize, seed: u64) -> Self {
        Self {
            height: default_side(),
            width: default_side(),
            channels: default_channels(),
            classes,
            samples,
            seed,
            noise: default_noise(),
            components: default_components(),
            max_shift: default_shift(),
        }
    }
}

struct Grating {
    fx: f64,
    fy: f64,
    phase: f64,
    color: Vec<f64>,
}

/// Class templates are sums of oriented sinusoidal gratings with random
/// colors. Each sample is its class template with a random cyclic shift,
/// amplitude jitter and additive pixel noise. Labels are balanced.
pub fn synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.samples < spec.classes || spec.height == 0 || spec.width == 0 || spec.channels == 0 {
        return Err(Error::Config(format!("degenerate synthetic dataset {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shape = InputShape {
        height: spec.height,
        width: spec.width,
        channels: spec.channels,
    };
    let tau = std::f64::consts::TAU;
    let templates: Vec<Vec<Grating>> = (0..spec.classes)
        .map(|_| {
            (0..spec.components.max(1))
                .map(|_| Grating {
                    fx: rng.random_range(0..=2) as f64 / spec.width as f64,
                    fy: rng.random_range(0..=2) as f64 / spec.height as f64,
                    phase: rng.random_range(0.0..tau),
                    color: (0..spec.channels).map(|_| rng.random_range(-1.0..1.0)).collect(),
                })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let mut images = Vec::with_capacity(spec.samples * h * w * c);
    let mut labels = Vec::with_capacity(spec.samples);
    let s = spec.max_shift as i64;
    for i in 0..spec.samples {
        let label = i % spec.classes;
        let dy = rng.random_range(-s..=s) as f64;
        let dx = rng.random_range(-s..=s) as f64;
        let amp = rng.random_range(0.7..1.3);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v: f64 = templates[label]
                        .iter()
                        .map(|g| {
                            g.color[ch] * (tau * (g.fx * (x as f64 + dx) + g.fy * (y as f64 + dy)) + g.phase).cos()
                        })
                        .sum();
                    images.push((amp * v + noise.sample(&mut rng)) as f32);
                }
            }
        }
        labels.push(label);
    }
    // Interleaved labels would survive any split; shuffle sample order.
    let mut order: Vec<usize> = (0..spec.samples).collect();
    order.shuffle(&mut rng);
    Dataset::new(shape, spec.classes, images, labels).map(|d| d.subset(&order))
}

/// Reads CIFAR-10 binary batch files (1 label byte then 3072 planar pixel
/// bytes per record). With `limit`, a seeded uniform subset of records is
/// kept. `downsample` averages `f x f` pixel blocks.
pub fn load_cifar10(paths: &[impl AsRef<Path>], limit: Option<usize>, downsample: usize, seed: u64) -> Result<Dataset> {
    let mut raw = Vec::new();
    for p in paths {
        let bytes = std::fs::read(p.as_ref())?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Dataset(format!(
                "{}: size {} is not a multiple of {CIFAR_RECORD}",
                p.as_ref().display(),
                bytes.len()
            )));
        }
        raw.extend(bytes);
    }
    parse_cifar10(&raw, limit, downsample, seed)
}

pub fn parse_cifar10(raw: &[u8], limit: Option<usize>, downsample: usize, seed: u64) -> Result<Dataset> {
    if raw.len() % CIFAR_RECORD != 0 || raw.is_empty() {
        return Err(Error::Dataset(format!(
            "{} bytes is not a positive multiple of {CIFAR_RECORD}",
            raw.len()
        )));
    }
    let f = downsample.max(1);
    if CIFAR_SIDE % f != 0 {
        return Err(Error::Config(format!("downsample {f} does not divide {CIFAR_SIDE}")));
    }
    let records = raw.len() / CIFAR_RECORD;
    let mut chosen: Vec<usize> = (0..records).collect();
    if let Some(n) = limit {
        if n < records {
            chosen = rand::seq::index::sample(&mut ChaCha8Rng::seed_from_u64(seed), records, n).into_vec();
            chosen.sort_unstable();
        }
    }
    let side = CIFAR_SIDE / f;
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut images = Vec::with_capacity(chosen.len() * side * side * 3);
    let mut labels = Vec::with_capacity(chosen.len());
    let scale = 1.0 / (255.0 * (f * f) as f32);
    for &r in &chosen {
        let rec = &raw[r * CIFAR_RECORD..(r + 1) * CIFAR_RECORD];
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Dataset(format!("record {r}: label {label} out of range")));
        }
        labels.push(label);
        let px = &rec[1..];
        for y in 0..side {
            for x in 0..side {
                for ch in 0..3 {
                    let mut acc = 0u32;
                    for dy in 0..f {
                        for dx in 0..f {
                            acc += px[ch * plane + (y * f + dy) * CIFAR_SIDE + x * f + dx] as u32;
                        }
                    }
                    images.push(acc as f32 * scale);
                }
            }
        }
    }
    let shape = InputShape {
        height: side,
        width: side,
        channels: 3,
    };
    Dataset::new(shape, CIFAR_CLASSES, images, labels)
}
