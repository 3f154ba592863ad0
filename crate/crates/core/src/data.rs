//! Labeled image sets: a synthetic generator, IDX and CIFAR-10 binary
//! readers, and the stratified hold-out split.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Images in `[0, 1]` with integer class labels. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl LabeledImageSet {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::DataFormat(format!("images must be [N,C,H,W], got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::DataFormat(format!("{} images but {} labels", images.shape()[0], labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::DataFormat(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self { images, labels, num_classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.select_outer(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        let (images, labels) = self.batch(indices)?;
        Self::new(images, labels, self.num_classes, split)
    }

    /// Number of samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Oriented gratings plus a class-positioned Gaussian blob, with noise.
///
/// Class `c` of `K` uses grating orientation `πc/K` and a blob centred on a
/// ring at angle `2πc/K`; each sample draws a random grating phase, a small
/// blob offset, an intensity jitter, and pixel noise. Sample `i` has class
/// `i mod K`.
pub fn generate_synthetic(
    num_classes: usize,
    per_class: usize,
    image_shape: [usize; 3],
    seed: u64,
) -> Result<LabeledImageSet> {
    if per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be at least 1".into()));
    }
    if num_classes == 0 || image_shape.contains(&0) {
        return Err(Error::InvalidArgument("empty class count or image shape".into()));
    }
    let [c, h, w] = image_shape;
    let n = num_classes * per_class;
    let mut rng = rng::stream(seed, &[0x5e_17]);
    let noise = Normal::new(0.0, 0.1).expect("valid sigma");
    let size = h.min(w) as f64;
    let radius = 0.28 * size;
    let sigma = 0.14 * size;
    let freq = 2.5;

    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % num_classes;
        let theta = PI * class as f64 / num_classes as f64;
        let alpha = 2.0 * PI * class as f64 / num_classes as f64;
        let phase = rng.random_range(0.0..2.0 * PI);
        let cy = (h as f64 - 1.0) / 2.0 + radius * alpha.sin() + rng.random_range(-1.0..1.0);
        let cx = (w as f64 - 1.0) / 2.0 + radius * alpha.cos() + rng.random_range(-1.0..1.0);
        let gain = rng.random_range(0.8..1.0);
        for _ in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (yf, xf) = (y as f64, x as f64);
                    let proj = (xf * theta.cos() + yf * theta.sin()) / size;
                    let grating = 0.5 + 0.5 * (2.0 * PI * freq * proj + phase).sin();
                    let d2 = (yf - cy).powi(2) + (xf - cx).powi(2);
                    let blob = (-d2 / (2.0 * sigma * sigma)).exp();
                    let v = gain * (0.35 * grating + 0.65 * blob) + noise.sample(&mut rng);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(class);
    }
    LabeledImageSet::new(Tensor::new(vec![n, c, h, w], data)?, labels, num_classes, Split::Train)
}

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::DataFormat(format!("{what}: file ends inside the header")))
}

/// Reads an IDX image file (unsigned bytes, 3 dims) and label file
/// (unsigned bytes, 1 dim). Pixels are scaled by 1/255 and the class count
/// is the largest label plus one.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledImageSet> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    parse_idx(&images, &labels)
}

pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledImageSet> {
    let magic = be_u32(images, 0, "image file")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::DataFormat(format!("image file has magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}")));
    }
    let n = be_u32(images, 4, "image file")? as usize;
    let rows = be_u32(images, 8, "image file")? as usize;
    let cols = be_u32(images, 12, "image file")? as usize;
    let pixels = &images[16..];
    if pixels.len() != n * rows * cols {
        return Err(Error::DataFormat(format!(
            "image file declares {n}x{rows}x{cols} bytes but holds {}",
            pixels.len()
        )));
    }

    let magic = be_u32(labels, 0, "label file")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::DataFormat(format!("label file has magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}")));
    }
    let n_labels = be_u32(labels, 4, "label file")? as usize;
    let raw = &labels[8..];
    if raw.len() != n_labels {
        return Err(Error::DataFormat(format!("label file declares {n_labels} labels but holds {}", raw.len())));
    }
    if n_labels != n {
        return Err(Error::DataFormat(format!("{n} images but {n_labels} labels")));
    }

    let data = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = raw.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    LabeledImageSet::new(Tensor::new(vec![n, 1, rows, cols], data)?, labels, num_classes, Split::Train)
}

/// Reads one CIFAR-10 binary batch (records of 1 label byte + 3072 pixels).
pub fn load_cifar10_batch(path: &Path) -> Result<LabeledImageSet> {
    const RECORD: usize = 1 + 3 * 32 * 32;
    let bytes = fs::read(path)?;
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(Error::DataFormat(format!("CIFAR-10 batch length {} is not a multiple of {RECORD}", bytes.len())));
    }
    let n = bytes.len() / RECORD;
    let mut data = Vec::with_capacity(n * (RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(RECORD) {
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    LabeledImageSet::new(Tensor::new(vec![n, 3, 32, 32], data)?, labels, 10, Split::Train)
}

/// Stratified, seeded split of `train` into (train', val). Each class sends
/// `round(count * val_fraction)` samples (at least one, and never all) to
/// validation. Both parts keep the original sample order.
pub fn holdout_split(
    train: &LabeledImageSet,
    val_fraction: f64,
    seed: u64,
) -> Result<(LabeledImageSet, LabeledImageSet)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("val_fraction must lie in (0, 1), got {val_fraction}")));
    }
    let mut by_class = vec![Vec::new(); train.num_classes()];
    for (i, &l) in train.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = rng::stream(seed, &[0x5_917]);
    let mut val_idx = Vec::new();
    let mut train_idx = Vec::new();
    for (class, mut idx) in by_class.into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "class {class} has {} sample(s); a split needs at least 2",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n_val = ((idx.len() as f64 * val_fraction).round() as usize).clamp(1, idx.len() - 1);
        val_idx.extend_from_slice(&idx[..n_val]);
        train_idx.extend_from_slice(&idx[n_val..]);
    }
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((train.subset(&train_idx, train.split())?, train.subset(&val_idx, Split::Val)?))
}
