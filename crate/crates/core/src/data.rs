//! Image datasets: CIFAR binary records and a synthetic grating generator.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
const PIXELS: usize = 3 * IMAGE_SIZE * IMAGE_SIZE;

pub const CIFAR10_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];
pub const CIFAR100_MEAN: [f64; 3] = [0.5071, 0.4865, 0.4409];
pub const CIFAR100_STD: [f64; 3] = [0.2673, 0.2564, 0.2762];
pub const SYNTHETIC_MEAN: [f64; 3] = [0.5, 0.5, 0.5];
pub const SYNTHETIC_STD: [f64; 3] = [0.25, 0.25, 0.25];

/// Per-channel normalization applied to `[0, 1]` pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub const CIFAR10: Self = Self {
        mean: CIFAR10_MEAN,
        std: CIFAR10_STD,
    };
    pub const CIFAR100: Self = Self {
        mean: CIFAR100_MEAN,
        std: CIFAR100_STD,
    };
    pub const SYNTHETIC: Self = Self {
        mean: SYNTHETIC_MEAN,
        std: SYNTHETIC_STD,
    };

    fn apply(&self, channel: usize, byte: u8) -> f64 {
        (byte as f64 / 255.0 - self.mean[channel]) / self.std[channel]
    }

    fn invert(&self, channel: usize, value: f64) -> u8 {
        let v = value * self.std[channel] + self.mean[channel];
        (v * 255.0).round().clamp(0.0, 255.0) as u8
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    class_count: usize,
    norm: Normalization,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize, norm: Normalization) -> Result<Self> {
        let (n, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::shape("dataset", format!("images have {c} channels, expected 3")));
        }
        if n != labels.len() {
            return Err(Error::shape("dataset", format!("{n} images but {} labels", labels.len())));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape("dataset", format!("image size {h}×{w} not divisible by 4")));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: class_count,
            });
        }
        Ok(Self {
            images,
            labels,
            class_count,
            norm,
        })
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

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn normalization(&self) -> Normalization {
        self.norm
    }

    /// `(height, width)` of every image.
    pub fn image_size(&self) -> (usize, usize) {
        let s = self.images.shape();
        (s[2], s[3])
    }

    /// Stacks the images at `idx`. With an `augment` stream, each image gets
    /// a random crop from a 4-pixel zero-padded frame and a random flip.
    pub fn gather(&self, idx: &[usize], augment: Option<&mut Rng>) -> Result<Tensor> {
        let mut batch = self.images.gather_rows(idx)?;
        if let Some(rng) = augment {
            let (_, c, h, w) = batch.dims4()?;
            let per = c * h * w;
            for img in batch.data_mut().chunks_mut(per) {
                let dy = rng.below(9) as isize - 4;
                let dx = rng.below(9) as isize - 4;
                let flip = rng.bernoulli(0.5);
                let src = img.to_vec();
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let sy = y as isize + dy;
                            let sx0 = if flip { w - 1 - x } else { x };
                            let sx = sx0 as isize + dx;
                            img[(ch * h + y) * w + x] =
                                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                    0.0
                                } else {
                                    src[(ch * h + sy as usize) * w + sx as usize]
                                };
                        }
                    }
                }
            }
        }
        Ok(batch)
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.gather_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            norm: self.norm,
        })
    }

    /// Random split into `(train, val)` with `val_fraction` of the examples
    /// (at least one) held out.
    pub fn split(&self, val_fraction: f64, rng: &mut Rng) -> Result<(Self, Self)> {
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!("split fraction {val_fraction} not in (0, 1)")));
        }
        let perm = rng.permutation(self.len());
        let n_val = ((self.len() as f64 * val_fraction).round() as usize).clamp(1, self.len().max(1));
        let (val, train) = perm.split_at(n_val.min(perm.len()));
        Ok((self.subset(train)?, self.subset(val)?))
    }
}

/// Which CIFAR record layout a file uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarKind {
    Cifar10,
    Cifar100,
}

impl CifarKind {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarKind::Cifar10 => 1,
            CifarKind::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + PIXELS
    }

    pub fn class_count(self) -> usize {
        match self {
            CifarKind::Cifar10 => 10,
            CifarKind::Cifar100 => 100,
        }
    }

    pub fn normalization(self) -> Normalization {
        match self {
            CifarKind::Cifar10 => Normalization::CIFAR10,
            CifarKind::Cifar100 => Normalization::CIFAR100,
        }
    }

    fn train_files(self) -> Vec<&'static str> {
        match self {
            CifarKind::Cifar10 => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            CifarKind::Cifar100 => vec!["train.bin"],
        }
    }
}

/// Decodes CIFAR binary records: label byte(s) then 3072 channel-major pixel
/// bytes. The last label byte is used (CIFAR-100's fine label).
pub fn decode_records(bytes: &[u8], kind: CifarKind, class_count: usize, norm: Normalization) -> Result<Dataset> {
    let rec = kind.record_len();
    if !bytes.len().is_multiple_of(rec) {
        let offset = bytes.len() - bytes.len() % rec;
        return Err(Error::Format(format!(
            "truncated record at byte offset {offset}: {} of {rec} bytes present",
            bytes.len() - offset
        )));
    }
    let n = bytes.len() / rec;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * PIXELS);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let label = r[kind.label_bytes() - 1] as usize;
        if label >= class_count {
            return Err(Error::Format(format!(
                "label {label} at byte offset {} exceeds {class_count} classes",
                i * rec + kind.label_bytes() - 1
            )));
        }
        labels.push(label);
        let pixels = &r[kind.label_bytes()..];
        for (ch, plane) in pixels.chunks_exact(IMAGE_SIZE * IMAGE_SIZE).enumerate() {
            data.extend(plane.iter().map(|&b| norm.apply(ch, b)));
        }
    }
    let images = Tensor::new(vec![n, 3, IMAGE_SIZE, IMAGE_SIZE], data)?;
    Dataset::new(images, labels, class_count, norm)
}

/// Quantizes a dataset back into CIFAR records (label bytes, then pixels).
/// For CIFAR-100 the coarse label byte is written as 0.
pub fn encode_records(dataset: &Dataset, kind: CifarKind) -> Result<Vec<u8>> {
    let (h, w) = dataset.image_size();
    if (h, w) != (IMAGE_SIZE, IMAGE_SIZE) {
        return Err(Error::shape("encode_records", format!("{h}×{w} images, records hold 32×32")));
    }
    if dataset.class_count() > 256 {
        return Err(Error::InvalidArgument("labels do not fit in one byte".into()));
    }
    let norm = dataset.normalization();
    let mut out = Vec::with_capacity(dataset.len() * kind.record_len());
    for i in 0..dataset.len() {
        if kind == CifarKind::Cifar100 {
            out.push(0);
        }
        out.push(dataset.labels()[i] as u8);
        for (j, &v) in dataset.images().row(i).iter().enumerate() {
            out.push(norm.invert(j / (IMAGE_SIZE * IMAGE_SIZE), v));
        }
    }
    Ok(out)
}

/// Loads a CIFAR file, or every training batch file when `path` is a
/// directory, normalized with the dataset's standard statistics.
pub fn load_cifar(path: &Path, kind: CifarKind) -> Result<Dataset> {
    load_cifar_classes(path, kind, kind.class_count())
}

/// [`load_cifar`] for files in a CIFAR layout holding `class_count` classes.
pub fn load_cifar_classes(path: &Path, kind: CifarKind, class_count: usize) -> Result<Dataset> {
    let files: Vec<PathBuf> = if path.is_dir() {
        kind.train_files().iter().map(|f| path.join(f)).collect()
    } else {
        vec![path.to_path_buf()]
    };
    let mut bytes = Vec::new();
    for f in &files {
        bytes.extend(std::fs::read(f).map_err(|e| Error::io(f, e))?);
    }
    let ds = decode_records(&bytes, kind, class_count, kind.normalization())?;
    if ds.is_empty() {
        log::warn!("{} holds no records", path.display());
    }
    Ok(ds)
}

/// Parameters of the grating dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub n_per_class: usize,
    /// Standard deviation of additive pixel noise (in `[0, 1]` pixel units).
    pub noise_std: f64,
}

/// Grating cycles across the image.
const GRATING_CYCLES: f64 = 3.0;
const GRATING_AMPLITUDE: f64 = 0.3;

/// Class `k` is a sinusoidal grating at angle `π·k/K` with a class-specific
/// colour balance, plus Gaussian pixel noise; pixels are clamped to `[0, 1]`
/// and quantized to bytes before normalization. Examples are interleaved by
/// class.
pub fn gen_synthetic(spec: SyntheticSpec, rng: &mut Rng) -> Result<Dataset> {
    if spec.class_count < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs at least 2 classes, got {}",
            spec.class_count
        )));
    }
    if spec.class_count > 256 {
        return Err(Error::InvalidArgument("at most 256 synthetic classes".into()));
    }
    let templates: Vec<Vec<f64>> = (0..spec.class_count).map(|k| grating(k, spec.class_count)).collect();
    let n = spec.class_count * spec.n_per_class;
    let norm = Normalization::SYNTHETIC;
    let mut data = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..spec.n_per_class {
        for (k, template) in templates.iter().enumerate() {
            labels.push(k);
            for (j, &t) in template.iter().enumerate() {
                let noise = if spec.noise_std > 0.0 { spec.noise_std * rng.normal() } else { 0.0 };
                let byte = ((t + noise).clamp(0.0, 1.0) * 255.0).round() as u8;
                data.push(norm.apply(j / (IMAGE_SIZE * IMAGE_SIZE), byte));
            }
        }
    }
    let images = Tensor::new(vec![n, 3, IMAGE_SIZE, IMAGE_SIZE], data)?;
    Dataset::new(images, labels, spec.class_count, norm)
}

fn grating(k: usize, classes: usize) -> Vec<f64> {
    let theta = std::f64::consts::PI * k as f64 / classes as f64;
    let (s, c) = theta.sin_cos();
    let freq = 2.0 * std::f64::consts::PI * GRATING_CYCLES / IMAGE_SIZE as f64;
    let mut out = Vec::with_capacity(PIXELS);
    for ch in 0..3 {
        let tint = 0.8 + 0.2 * ((k + ch) % 3) as f64 / 2.0;
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let phase = freq * (x as f64 * c + y as f64 * s);
                out.push(0.5 + GRATING_AMPLITUDE * tint * phase.sin());
            }
        }
    }
    out
}
