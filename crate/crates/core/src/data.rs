//! Labeled datasets: synthetic Gaussian blobs, CIFAR-10 binary batches,
//! CSV raw tensors, stratified splitting and per-channel normalization.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{ImageBatch, Shape};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub images: ImageBatch<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: ImageBatch<T>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::input(format!("{} images but {} labels", images.len(), labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::input(format!("label {l} out of range for {classes} classes")));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> Shape {
        self.images.shape()
    }

    /// Sample indices grouped by class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.class_indices().iter().map(Vec::len).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Splits per class: `ceil(ratio · n_c)` shuffled samples of every class go
    /// to the first part, the rest to the second. Both parts keep dataset order.
    pub fn stratified_split(&self, ratio: f64, seed: u64) -> Result<(Self, Self)> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::config(format!("split ratio {ratio} outside (0, 1]")));
        }
        let mut r = rng::rng(seed);
        let mut first = Vec::new();
        let mut second = Vec::new();
        for mut idx in self.class_indices() {
            idx.shuffle(&mut r);
            let k = ((ratio * idx.len() as f64).ceil() as usize).min(idx.len());
            first.extend_from_slice(&idx[..k]);
            second.extend_from_slice(&idx[k..]);
        }
        first.sort_unstable();
        second.sort_unstable();
        Ok((self.subset(&first), self.subset(&second)))
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset { images: self.images.map(crate::scalar::cast), labels: self.labels.clone(), classes: self.classes }
    }
}

/// Gaussian clusters, one per class, with unit-variance isotropic noise.
///
/// Class means are mutually orthogonal (pairwise distance `separation`)
/// while `classes <= dim`; extra classes get random directions at radius
/// `separation / sqrt(2)`.
pub fn synthetic_blob_dataset<T: Scalar>(
    classes: usize,
    per_class: usize,
    shape: Shape,
    separation: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    if !(separation > 0.0) {
        return Err(Error::config(format!("blob separation must be positive, got {separation}")));
    }
    if classes == 0 {
        return Err(Error::config("blob dataset needs at least one class"));
    }
    let dim = shape.numel();
    let mut r = rng::rng(seed);
    let radius = separation / std::f64::consts::SQRT_2;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
        if means.len() < dim {
            for m in &means {
                let proj: f64 = v.iter().zip(m).map(|(a, b)| a * b).sum::<f64>() / (radius * radius);
                v.iter_mut().zip(m).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        means.push(v.into_iter().map(|a| a * radius / n).collect());
    }
    if per_class == 0 {
        log::warn!("blob dataset with zero samples per class");
    }
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for (c, mean) in means.iter().enumerate() {
            for &m in mean {
                let noise: f64 = StandardNormal.sample(&mut r);
                data.push(T::lit(m + noise));
            }
            labels.push(c);
        }
    }
    Dataset::new(ImageBatch::new(shape, data)?, labels, classes)
}

/// Per-channel affine normalization fitted on one split and applied to all.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Raw per-channel minimum and maximum seen when fitting.
    pub raw_min: Vec<f64>,
    pub raw_max: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
            raw_min: vec![f64::NEG_INFINITY; channels],
            raw_max: vec![f64::INFINITY; channels],
        }
    }

    pub fn fit<T: Scalar>(data: &Dataset<T>) -> Result<Self> {
        let shape = data.shape();
        if data.is_empty() {
            return Err(Error::config("cannot fit normalization on an empty split"));
        }
        let plane = shape.height * shape.width;
        let c = shape.channels;
        let (mut sum, mut sq) = (vec![0.0; c], vec![0.0; c]);
        let (mut lo, mut hi) = (vec![f64::INFINITY; c], vec![f64::NEG_INFINITY; c]);
        for img in data.images.iter() {
            for ch in 0..c {
                for &v in &img[ch * plane..(ch + 1) * plane] {
                    let v = v.real();
                    sum[ch] += v;
                    sq[ch] += v * v;
                    lo[ch] = lo[ch].min(v);
                    hi[ch] = hi[ch].max(v);
                }
            }
        }
        let n = (data.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std, raw_min: lo, raw_max: hi })
    }

    pub fn apply<T: Scalar>(&self, data: &mut Dataset<T>) -> Result<()> {
        let shape = data.shape();
        if shape.channels != self.mean.len() {
            return Err(Error::shape(self.mean.len(), shape.channels));
        }
        let plane = shape.height * shape.width;
        for i in 0..data.len() {
            let img = data.images.image_mut(i);
            for ch in 0..shape.channels {
                let (m, s) = (T::lit(self.mean[ch]), T::lit(self.std[ch]));
                for v in &mut img[ch * plane..(ch + 1) * plane] {
                    *v = (*v - m) / s;
                }
            }
        }
        Ok(())
    }

    /// Per-channel valid range in normalized space.
    pub fn normalized_range(&self) -> Vec<(f64, f64)> {
        (0..self.mean.len())
            .map(|c| ((self.raw_min[c] - self.mean[c]) / self.std[c], (self.raw_max[c] - self.mean[c]) / self.std[c]))
            .collect()
    }
}

const CIFAR_SHAPE: Shape = Shape::new(3, 32, 32);
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Parses one CIFAR-10 binary batch (label byte + 3072 channel-major pixels per record).
pub fn parse_cifar10_batch<T: Scalar>(bytes: &[u8]) -> Result<Dataset<T>> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::format(
            bytes.len() - bytes.len() % CIFAR_RECORD,
            format!("trailing partial record ({} bytes)", bytes.len() % CIFAR_RECORD),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * CIFAR_SHAPE.numel());
    let scale = T::lit(1.0 / 255.0);
    for (k, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::format(k * CIFAR_RECORD, format!("label byte {} out of range", rec[0])));
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&p| T::lit(p as f64) * scale));
    }
    Dataset::new(ImageBatch::new(CIFAR_SHAPE, data)?, labels, 10)
}

fn cifar_dir(root: &Path) -> PathBuf {
    let nested = root.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

/// Loads `data_batch_{1..5}.bin` and `test_batch.bin` from `root` (or from
/// `root/cifar-10-batches-bin`). Pixels are scaled to `[0, 1]`.
pub fn load_cifar10<T: Scalar>(root: impl AsRef<Path>) -> Result<(Dataset<T>, Dataset<T>)> {
    let dir = cifar_dir(root.as_ref());
    let mut train: Option<Dataset<T>> = None;
    for b in 1..=5 {
        let path = dir.join(format!("data_batch_{b}.bin"));
        let part = parse_cifar10_batch::<T>(
            &fs::read(&path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?,
        )?;
        train = Some(match train {
            None => part,
            Some(mut acc) => {
                for img in part.images.iter() {
                    acc.images.push(img)?;
                }
                acc.labels.extend(part.labels);
                acc
            }
        });
    }
    let test_path = dir.join("test_batch.bin");
    let test = parse_cifar10_batch::<T>(
        &fs::read(&test_path).map_err(|e| Error::config(format!("cannot read {}: {e}", test_path.display())))?,
    )?;
    Ok((train.expect("five batches"), test))
}

/// True when a CIFAR-10 binary layout exists under `root`.
pub fn cifar10_available(root: impl AsRef<Path>) -> bool {
    let dir = cifar_dir(root.as_ref());
    (1..=5).all(|b| dir.join(format!("data_batch_{b}.bin")).is_file()) && dir.join("test_batch.bin").is_file()
}

/// Reads rows of `label,v_1,...,v_n` (no header) into a dataset of the given shape.
pub fn load_csv<T: Scalar>(path: impl AsRef<Path>, shape: Shape, classes: usize) -> Result<Dataset<T>> {
    let text = fs::read_to_string(path.as_ref())?;
    parse_csv(&text, shape, classes)
}

pub fn parse_csv<T: Scalar>(text: &str, shape: Shape, classes: usize) -> Result<Dataset<T>> {
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut offset = 0;
    for (lineno, line) in text.lines().enumerate() {
        let row_start = offset;
        offset += line.len() + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',');
        let label: usize = fields
            .next()
            .and_then(|f| f.trim().parse().ok())
            .ok_or_else(|| Error::format(row_start, format!("line {}: bad label", lineno + 1)))?;
        let before = data.len();
        for f in fields {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| Error::format(row_start, format!("line {}: bad value {f:?}", lineno + 1)))?;
            data.push(T::lit(v));
        }
        if data.len() - before != shape.numel() {
            return Err(Error::format(
                row_start,
                format!("line {}: {} values, expected {}", lineno + 1, data.len() - before, shape.numel()),
            ));
        }
        labels.push(label);
    }
    Dataset::new(ImageBatch::new(shape, data)?, labels, classes)
}
