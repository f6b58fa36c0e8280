//! Image datasets: CIFAR binary batches and a synthetic pattern generator.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

/// Labeled images in `[N, C, H, W]` layout with pixel values in `[0, 1]`
/// (before optional standardization).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Per-channel `(mean, std)` applied by [`Dataset::standardize`].
    pub standardization: Option<Vec<(f32, f32)>>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Config(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Self {
            images,
            labels,
            classes,
            standardization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Indices of every sample of each class, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// Images and labels of the given samples.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.gather_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (images, labels) = self.batch(indices)?;
        Ok(Dataset {
            images,
            labels,
            classes: self.classes,
            standardization: self.standardization.clone(),
        })
    }

    /// Shifts and scales each channel to zero mean and unit variance,
    /// recording the statistics in `standardization`.
    pub fn standardize(&mut self) {
        let s = self.images.shape().to_vec();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let mut stats = Vec::with_capacity(c);
        for ch in 0..c {
            let vals = (0..n).flat_map(|i| {
                let base = (i * c + ch) * plane;
                self.images.data()[base..base + plane].iter().map(|&v| v as f64)
            });
            let (sum, sq, cnt) = vals.fold((0.0, 0.0, 0usize), |(a, b, k), v| (a + v, b + v * v, k + 1));
            let mean = sum / cnt.max(1) as f64;
            let std = (sq / cnt.max(1) as f64 - mean * mean).max(1e-12).sqrt();
            stats.push((mean as f32, std as f32));
        }
        self.apply_standardization(&stats);
    }

    /// Applies previously computed per-channel statistics (e.g. training
    /// statistics to a test split).
    pub fn apply_standardization(&mut self, stats: &[(f32, f32)]) {
        let s = self.images.shape().to_vec();
        let (c, plane) = (s[1], s[2] * s[3]);
        for (p, chunk) in self.images.data_mut().chunks_mut(plane).enumerate() {
            let (m, sd) = stats[p % c];
            chunk.iter_mut().for_each(|v| *v = (*v - m) / sd);
        }
        self.standardization = Some(stats.to_vec());
    }
}

/// Deterministic single-channel dataset of oriented sinusoidal bars.
///
/// Class `c` fixes the bar orientation (`c mod 5` steps of 36°) and spatial
/// frequency (`c / 5`); each sample draws a random phase and contrast and
/// adds Gaussian noise, so classification requires orientation- and
/// frequency-selective filters rather than pixel lookups.
pub fn synthesize_dataset(classes: usize, per_class: usize, size: (usize, usize), seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!("synthetic dataset needs at least 2 classes, got {classes}")));
    }
    let (h, w) = size;
    if h < 4 || w < 4 {
        return Err(Error::Config(format!("synthetic images must be at least 4x4, got {h}x{w}")));
    }
    let orientations = classes.min(5);
    let noise = Normal::new(0.0f64, 0.25).expect("valid sigma");
    let mut data = Vec::with_capacity(classes * per_class * h * w);
    let mut labels = Vec::with_capacity(classes * per_class);
    let extent = h.max(w) as f64;
    for c in 0..classes {
        let mut rng = stream(seed, &[0xda7a, c as u64]);
        let theta = std::f64::consts::PI * (c % orientations) as f64 / orientations as f64;
        let variant = c / orientations;
        let cycles = 1.25 + 0.9 * variant as f64;
        for _ in 0..per_class {
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let contrast = rng.random_range(0.4..1.0);
            let jitter = rng.random_range(-0.15..0.15);
            let (cj, sj) = ((theta + jitter).cos(), (theta + jitter).sin());
            for y in 0..h {
                for x in 0..w {
                    let u = (x as f64 * cj + y as f64 * sj) / extent;
                    let v = 0.5 + 0.35 * contrast * (std::f64::consts::TAU * cycles * u + phase).sin()
                        + noise.sample(&mut rng);
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
            labels.push(c);
        }
    }
    let images = Tensor::new(vec![classes * per_class, 1, h, w], data)?;
    Dataset::new(images, labels, classes)
}

const CIFAR_PIXELS: usize = 3 * 32 * 32;

/// Parses CIFAR binary records. `label_bytes` is 1 for CIFAR-10 and 2 for
/// CIFAR-100 (coarse then fine; the fine label is used).
pub fn parse_cifar_records(bytes: &[u8], label_bytes: usize, classes: usize) -> Result<(Vec<f32>, Vec<usize>)> {
    let record = label_bytes + CIFAR_PIXELS;
    if bytes.len() % record != 0 {
        return Err(Error::Format {
            offset: (bytes.len() - bytes.len() % record) as u64,
            message: format!(
                "{} bytes is not a whole number of {record}-byte records ({} trailing bytes)",
                bytes.len(),
                bytes.len() % record
            ),
        });
    }
    let n = bytes.len() / record;
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[label_bytes - 1] as usize;
        if label >= classes {
            return Err(Error::Format {
                offset: (i * record + label_bytes - 1) as u64,
                message: format!("label {label} outside 0..{classes}"),
            });
        }
        labels.push(label);
        pixels.extend(rec[label_bytes..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

/// Encodes one CIFAR-10 record: label byte then 3072 CHW pixel bytes.
pub fn encode_cifar10_record(label: u8, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != CIFAR_PIXELS {
        return Err(Error::Shape(format!("CIFAR record needs {CIFAR_PIXELS} pixels, got {}", pixels.len())));
    }
    let mut out = Vec::with_capacity(CIFAR_PIXELS + 1);
    out.push(label);
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Recovers the record bytes of sample `i` (pixels rescaled by 255).
pub fn cifar10_record_of(ds: &Dataset, i: usize) -> Result<Vec<u8>> {
    let (img, labels) = ds.batch(&[i])?;
    let pixels: Vec<u8> = img.data().iter().map(|&v| (v * 255.0).round() as u8).collect();
    encode_cifar10_record(labels[0] as u8, &pixels)
}

fn load_files(dir: &Path, files: &[&str], label_bytes: usize, classes: usize) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let path = dir.join(f);
        let bytes = std::fs::read(&path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        let (p, l) = parse_cifar_records(&bytes, label_bytes, classes).map_err(|e| match e {
            Error::Format { offset, message } => Error::Format {
                offset,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })?;
        pixels.extend(p);
        labels.extend(l);
    }
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], pixels)?;
    Dataset::new(images, labels, classes)
}

/// Loads the CIFAR-10 binary distribution: `(train, test)` with 50000 and
/// 10000 samples.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_files(
        dir,
        &[
            "data_batch_1.bin",
            "data_batch_2.bin",
            "data_batch_3.bin",
            "data_batch_4.bin",
            "data_batch_5.bin",
        ],
        1,
        10,
    )?;
    let test = load_files(dir, &["test_batch.bin"], 1, 10)?;
    Ok((train, test))
}

/// Loads the CIFAR-100 binary distribution with fine labels.
pub fn load_cifar100(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((load_files(dir, &["train.bin"], 2, 100)?, load_files(dir, &["test.bin"], 2, 100)?))
}
