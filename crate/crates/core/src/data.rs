//! Dataset parsers (IDX, CIFAR-10 binary), synthetic datasets, splits and
//! subsetting.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::{read_file, Reader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Environment variable naming the dataset cache directory.
pub const DATA_ENV: &str = "COMPRESSKIT_DATA";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[count, channels, h, w]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: SplitTag,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: SplitTag) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("images {:?} vs {} labels", images.shape(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[c, h, w]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn select(&self, indices: &[usize], split: SplitTag) -> Dataset {
        Dataset {
            images: self.images.gather_outer(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split,
        }
    }

    /// Images and labels for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.gather_outer(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        self.labels.iter().for_each(|&l| h[l] += 1);
        h
    }

    /// The first `per_class` samples of every class, in original order.
    pub fn subset_per_class(&self, per_class: usize) -> Dataset {
        let mut taken = vec![0; self.classes];
        let indices: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let l = self.labels[i];
                taken[l] += 1;
                taken[l] <= per_class
            })
            .collect();
        self.select(&indices, self.split)
    }

    /// Replaces `[0, 1]` pixels with `(x − mean[c]) / std[c]`.
    pub fn standardize(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        let c = self.images.shape()[1];
        if mean.len() != c || std.len() != c || std.iter().any(|&s| s <= 0.0) {
            return Err(Error::invalid(format!(
                "need {c} means and positive std devs, got {mean:?} / {std:?}"
            )));
        }
        let plane: usize = self.images.shape()[2..].iter().product();
        for (i, chunk) in self.images.data_mut().chunks_mut(plane).enumerate() {
            let ch = i % c;
            chunk.iter_mut().for_each(|v| *v = (*v - mean[ch]) / std[ch]);
        }
        Ok(())
    }

    /// Per-channel mean pixel value.
    pub fn channel_means(&self) -> Vec<f64> {
        let c = self.images.shape()[1];
        let plane: usize = self.images.shape()[2..].iter().product();
        let mut sums = vec![0.0; c];
        for (i, chunk) in self.images.data().chunks(plane).enumerate() {
            sums[i % c] += chunk.iter().sum::<f64>();
        }
        let n = (self.len() * plane) as f64;
        sums.into_iter().map(|s| s / n).collect()
    }
}

/// Dataset cache directory: `$COMPRESSKIT_DATA`, else `./data`.
pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn magic_error(path: &Path, expected: u32, found: u32) -> Error {
    Error::BadMagic {
        path: path.to_path_buf(),
        expected: format!("0x{expected:08x}"),
        found: format!("0x{found:08x}"),
    }
}

/// Parses an IDX image file into `[count, 1, rows, cols]` pixels in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut r = Reader::new(bytes, path);
    let magic = r.u32_be("magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(magic_error(path, IDX_IMAGE_MAGIC, magic));
    }
    let count = r.u32_be("image count")? as usize;
    let rows = r.u32_be("row count")? as usize;
    let cols = r.u32_be("column count")? as usize;
    if count == 0 || rows == 0 || cols == 0 {
        return Err(r.error(4, "zero-sized dimension"));
    }
    let pixels = r.take(count * rows * cols, "pixel data")?;
    r.finish()?;
    Tensor::new(
        &[count, 1, rows, cols],
        pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let mut r = Reader::new(bytes, path);
    let magic = r.u32_be("magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(magic_error(path, IDX_LABEL_MAGIC, magic));
    }
    let count = r.u32_be("label count")? as usize;
    let labels = r.take(count, "label data")?;
    r.finish()?;
    Ok(labels.iter().map(|&l| l as usize).collect())
}

/// Loads an IDX image/label pair (the FashionMNIST distribution format).
pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<Dataset> {
    let images = parse_idx_images(&read_file(image_path)?, image_path)?;
    let labels = parse_idx_labels(&read_file(label_path)?, label_path)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::invalid(format!(
            "{} images in {} but {} labels in {}",
            images.shape()[0],
            image_path.display(),
            labels.len(),
            label_path.display()
        )));
    }
    let classes = labels.iter().max().map_or(1, |&m| m + 1).max(10);
    Dataset::new(images, labels, classes, SplitTag::Train)
}

/// FashionMNIST `(train, test)` from `dir`, using the distribution file names.
pub fn load_fashion_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let mut test = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
    test.split = SplitTag::Test;
    Ok((train, test))
}

/// Parses CIFAR-10 binary records: one label byte then 3072 pixel bytes
/// (R, G, B planes, each row-major 32×32).
pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<(Vec<f64>, Vec<usize>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: whole,
            detail: format!(
                "file length {} is not a positive multiple of {CIFAR_RECORD}; incomplete record at byte {whole}",
                bytes.len()
            ),
        });
    }
    let mut pixels = Vec::with_capacity(bytes.len());
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                offset: i * CIFAR_RECORD,
                detail: format!("label byte {} outside 0..=9", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&p| f64::from(p) / 255.0));
    }
    Ok((pixels, labels))
}

pub fn load_cifar10_binary(paths: &[PathBuf]) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::invalid("no CIFAR-10 batch files given"));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let (p, l) = parse_cifar10(&read_file(path)?, path)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let images = Tensor::new(&[labels.len(), 3, 32, 32], pixels)?;
    Dataset::new(images, labels, 10, SplitTag::Train)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Gaussian clusters in 16 dimensions, laid out as `1×4×4` images.
    Blobs,
    /// Class-dependent stripe patterns, `1×16×16`.
    StripedImages,
}

/// Deterministic, class-balanced synthetic dataset.
pub fn make_synthetic(kind: SyntheticKind, count: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if classes == 0 || count < classes {
        return Err(Error::invalid(format!(
            "need count >= classes > 0, got {count} samples for {classes} classes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..count).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let (shape, data) = match kind {
        SyntheticKind::Blobs => ([count, 1, 4, 4], blobs(&labels, classes, &mut rng)),
        SyntheticKind::StripedImages => ([count, 1, 16, 16], stripes(&labels, &mut rng)),
    };
    Dataset::new(Tensor::new(&shape, data)?, labels, classes, SplitTag::Train)
}

fn blobs(labels: &[usize], classes: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    const DIM: usize = 16;
    const SEPARATION: f64 = 8.0;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..DIM).map(|_| unit.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| SEPARATION * x / norm).collect()
        })
        .collect();
    let mut data = Vec::with_capacity(labels.len() * DIM);
    for &l in labels {
        data.extend(centres[l].iter().map(|c| c + 0.5 * unit.sample(rng)));
    }
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    data.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

fn stripes(labels: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    const SIDE: usize = 16;
    let mut data = Vec::with_capacity(labels.len() * SIDE * SIDE);
    for &l in labels {
        let freq = (l / 2 + 1) as f64;
        let vertical = l % 2 == 1;
        let amplitude = rng.random_range(0.7..1.0);
        for y in 0..SIDE {
            for x in 0..SIDE {
                let t = if vertical { x } else { y } as f64;
                let base = 0.5 + 0.5 * (std::f64::consts::TAU * freq * t / SIDE as f64).cos();
                let noise = rng.random_range(-0.05..0.05);
                data.push((amplitude * base + noise).clamp(0.0, 1.0));
            }
        }
    }
    data
}

/// Seeded disjoint partition into `(train, val, test)` with sizes
/// `round(f·n)` for train and val; the remainder goes to test.
pub fn split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
        return Err(Error::invalid(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let n = dataset.len();
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, rest) = order.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    Ok((
        dataset.select(train, SplitTag::Train),
        dataset.select(val, SplitTag::Val),
        dataset.select(test, SplitTag::Test),
    ))
}
