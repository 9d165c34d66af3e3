//! Datasets, patch extraction and augmentation.
//!
//! Images are stored channel-planar (`[channel][row][col]`) with values in
//! `[0, 1]`. Every random choice is drawn from a keyed [`Rng`] substream so
//! batches are a pure function of `(seed, epoch, step, image, patch)`.

mod augment;
mod batch;
mod cifar;
mod patches;
mod synthetic;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use augment::{augment, augment_patch, rgb_to_hsv, hsv_to_rgb, gaussian_kernel, AugmentPolicy, Transform};
pub use batch::{eval_views, make_batch, BatchKey, PatchGeometry};
pub use cifar::{encode_cifar, load_cifar, parse_cifar, write_cifar, CifarVariant, CIFAR100_RECORD_LEN, CIFAR10_RECORD_LEN};
pub use patches::{bilinear_resize, crop, extract_patches};
pub use synthetic::{gen_synthetic, SyntheticSpec};

pub use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("truncated file: {len} bytes is not a multiple of the {record}-byte record length")]
    TruncatedFile { len: usize, record: usize },
    #[error("record {index}: label {label} out of range for {num_classes} classes")]
    BadLabel {
        index: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("patch size {patch} exceeds image {height}x{width}")]
    PatchTooLarge {
        patch: usize,
        height: usize,
        width: usize,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub const CHANNELS: usize = 3;

/// Luminance weights for R, G, B.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// An RGB raster with values in `[0, 1]`, channel-planar.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(DataError::Invalid(format!(
                "image {height}x{width} needs {} values, got {}",
                CHANNELS * height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = Vec::with_capacity(CHANNELS * plane);
        for v in rgb {
            data.extend(std::iter::repeat(v).take(plane));
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(DataError::BadLabel {
                index,
                label,
                num_classes,
            });
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// First `n` images (or all, if fewer).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }

    /// Per-channel mean and standard deviation over every pixel.
    pub fn channel_stats(&self) -> NormStats {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut count = 0usize;
        for img in &self.images {
            for (c, (s, q)) in sum.iter_mut().zip(sq.iter_mut()).enumerate() {
                for &v in img.plane(c) {
                    *s += v as f64;
                    *q += (v as f64) * (v as f64);
                }
            }
            count += img.height * img.width;
        }
        let mut mean = [0.0; 3];
        let mut std = [1.0; 3];
        if count > 0 {
            for c in 0..3 {
                mean[c] = sum[c] / count as f64;
                let var = (sq[c] / count as f64 - mean[c] * mean[c]).max(0.0);
                std[c] = var.sqrt().max(1e-6);
            }
        }
        NormStats { mean, std }
    }
}

/// Per-channel standardization constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    /// Statistics of the full CIFAR-10 training split (50,000 images).
    pub fn cifar10() -> Self {
        Self {
            mean: [0.4914, 0.4822, 0.4465],
            std: [0.2470, 0.2435, 0.2616],
        }
    }
}

/// An augmented, standardized fixed-size patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchView {
    size: usize,
    data: Vec<f64>,
}

impl PatchView {
    /// `(x - mean) / std` per channel.
    pub fn standardize(img: &Image, stats: &NormStats) -> Self {
        assert_eq!(img.height, img.width, "patches are square");
        let plane = img.height * img.width;
        let data = img
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i / plane;
                (v as f64 - stats.mean[c]) / stats.std[c]
            })
            .collect();
        Self {
            size: img.height,
            data,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}
