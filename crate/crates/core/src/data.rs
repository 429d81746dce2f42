//! Labelled image sets: procedural toy blobs and the CIFAR-10 binary format.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Dataset {
    /// `N × C × H × W`, values in `[−1, 1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "{} labels for images {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Format(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-image `[C, H, W]`.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.gather_outer(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        })
    }

    /// Index batches covering a shuffled permutation; the last may be short.
    pub fn shuffled_batches<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }
}

/// Settings of the procedural blob images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyBlobs {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    /// Standard deviation of the blob centre around the image centre, as a
    /// fraction of the side.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    /// Standard deviation of the per-pixel background noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Standard deviation of the per-sample colour perturbation.
    #[serde(default = "default_color_jitter")]
    pub color_jitter: f64,
}

fn default_jitter() -> f64 {
    0.15
}

fn default_noise() -> f64 {
    0.1
}

fn default_color_jitter() -> f64 {
    0.15
}

impl ToyBlobs {
    pub fn new(num_classes: usize, per_class: usize, image_size: usize) -> Self {
        Self {
            num_classes,
            per_class,
            image_size,
            jitter: default_jitter(),
            noise: default_noise(),
            color_jitter: default_color_jitter(),
        }
    }
}

/// Distinct saturated colour for class `c` of `k`, in `[−1, 1]³`.
fn class_color(c: usize, k: usize) -> [f64; 3] {
    let h = c as f64 / k as f64 * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r * 2.0 - 1.0, g * 2.0 - 1.0, b * 2.0 - 1.0]
}

/// Class-coloured Gaussian blobs on a dark noisy background. Each image
/// holds one blob whose centre, radius and colour are jittered; the class
/// sets the mean colour. Samples are ordered class by class.
pub fn make_toy_blobs(spec: &ToyBlobs, seed: u64) -> Result<Dataset> {
    if spec.num_classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {}",
            spec.num_classes
        )));
    }
    if spec.per_class == 0 || spec.image_size < 4 {
        return Err(Error::Config(
            "toy set needs ≥ 1 sample per class and images ≥ 4 pixels".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = spec.image_size;
    let n = spec.num_classes * spec.per_class;
    let mut data = Vec::with_capacity(n * 3 * s * s);
    let mut labels = Vec::with_capacity(n);
    let gauss = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(StandardNormal);
    for c in 0..spec.num_classes {
        let base = class_color(c, spec.num_classes);
        for _ in 0..spec.per_class {
            let half = s as f64 / 2.0;
            let cy = half + gauss(&mut rng) * spec.jitter * s as f64;
            let cx = half + gauss(&mut rng) * spec.jitter * s as f64;
            let radius = s as f64 * rng.random_range(0.15..0.3);
            let color: Vec<f64> = base
                .iter()
                .map(|v| v + spec.color_jitter * gauss(&mut rng))
                .collect();
            for col in &color {
                for y in 0..s {
                    for x in 0..s {
                        let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                        let w = (-d2 / (2.0 * radius * radius)).exp();
                        let v = -0.8 * (1.0 - w) + col * w + spec.noise * gauss(&mut rng);
                        data.push(v.clamp(-1.0, 1.0) as f32);
                    }
                }
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(&[n, 3, s, s], data)?, labels, spec.num_classes)
}

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Decodes CIFAR-10 binary records (`label byte ‖ 3072 CHW pixel bytes`);
/// pixel `p` maps to `p/127.5 − 1`.
pub fn decode_cifar10(bytes: &[u8]) -> Result<(Vec<f32>, Vec<usize>)> {
    let full = bytes.len() / CIFAR_RECORD;
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "truncated CIFAR-10 record at byte offset {} ({} trailing bytes)",
            full * CIFAR_RECORD,
            bytes.len() % CIFAR_RECORD
        )));
    }
    let mut pixels = Vec::with_capacity(full * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(full);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let y = rec[0] as usize;
        if y >= 10 {
            return Err(Error::Format(format!(
                "label byte {y} at offset {} is not a CIFAR-10 class",
                i * CIFAR_RECORD
            )));
        }
        labels.push(y);
        pixels.extend(rec[1..].iter().map(|&p| p as f32 / 127.5 - 1.0));
    }
    Ok((pixels, labels))
}

/// Files of a split: `data_batch_{1..5}.bin` or `test_batch.bin` when `path`
/// is a directory, otherwise `path` itself.
pub fn cifar10_files(path: &Path, split: Split) -> Vec<PathBuf> {
    if !path.is_dir() {
        return vec![path.to_path_buf()];
    }
    match split {
        Split::Train => (1..=5)
            .map(|i| path.join(format!("data_batch_{i}.bin")))
            .collect(),
        Split::Test => vec![path.join("test_batch.bin")],
    }
}

pub fn load_cifar10_binary(path: &Path, split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for file in cifar10_files(path, split) {
        let bytes =
            fs::read(&file).map_err(|e| Error::Format(format!("{}: {e}", file.display())))?;
        let (p, l) = decode_cifar10(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", file.display())))?;
        pixels.extend(p);
        labels.extend(l);
    }
    if labels.is_empty() {
        return Err(Error::Format(format!("{}: no records", path.display())));
    }
    let n = labels.len();
    Dataset::new(Tensor::new(&[n, 3, 32, 32], pixels)?, labels, 10)
}
