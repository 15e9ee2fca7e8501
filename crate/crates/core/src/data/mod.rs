//! Image datasets, normalization and deterministic batching.
//!
//! Images are stored as interleaved `H × W × C` bytes. Tensors handed to the
//! network are normalized `[N, C, H, W]` floats.

mod batch;
mod formats;
mod presets;
mod synthetic;

pub use batch::{Augment, Batch, BatchConfig, BatchIter};
pub use formats::{load_cifar10, load_cifar10_file, load_mnist, load_mnist_idx, read_container, write_container};
pub use presets::{data_root, load_preset, DataSplits, SubsetRecord, DATA_ROOT_ENV, PRESETS};
pub use synthetic::{synthetic_easy_hard, synthetic_splits};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Ground-truth rendering difficulty of a synthetic sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// `len · H · W · C` bytes, sample-major, channels interleaved.
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    /// Present for synthetic data only.
    pub difficulty: Option<Vec<Difficulty>>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        [height, width, channels]: [usize; 3],
        num_classes: usize,
        images: Vec<u8>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let ds = Dataset {
            name: name.into(),
            split,
            height,
            width,
            channels,
            num_classes,
            images,
            labels,
            difficulty: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let per = self.sample_len();
        if per == 0 {
            return Err(Error::Data(format!("{}: zero-sized images", self.name)));
        }
        if self.images.len() != self.labels.len() * per {
            return Err(Error::Data(format!(
                "{}: {} image bytes do not match {} labels of {} bytes each",
                self.name,
                self.images.len(),
                self.labels.len(),
                per
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= self.num_classes) {
            return Err(Error::Data(format!("{}: label {} outside {} classes", self.name, bad, self.num_classes)));
        }
        if let Some(d) = &self.difficulty {
            if d.len() != self.labels.len() {
                return Err(Error::Data(format!("{}: difficulty metadata length mismatch", self.name)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Bytes per image.
    pub fn sample_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Network input shape `[C, H, W]`.
    pub fn chw(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            name: self.name.clone(),
            split: self.split,
            height: self.height,
            width: self.width,
            channels: self.channels,
            num_classes: self.num_classes,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            difficulty: self.difficulty.as_ref().map(|d| indices.iter().map(|&i| d[i]).collect()),
        }
    }

    pub fn labels_usize(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i] as usize).collect()
    }

    /// Indices of samples with the given ground-truth difficulty.
    pub fn indices_with(&self, difficulty: Difficulty) -> Vec<usize> {
        match &self.difficulty {
            Some(d) => (0..self.len()).filter(|&i| d[i] == difficulty).collect(),
            None => Vec::new(),
        }
    }

    /// Normalized `[N, C, H, W]` tensor of the given samples, unaugmented.
    pub fn tensor(&self, indices: &[usize], norm: &Normalization) -> Result<Tensor> {
        norm.check(self.channels)?;
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0f32; indices.len() * c * h * w];
        for (s, &i) in indices.iter().enumerate() {
            let img = self.image(i);
            for ch in 0..c {
                let dst = &mut out[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                for (p, d) in dst.iter_mut().enumerate() {
                    *d = norm.normalize(img[p * c + ch], ch);
                }
            }
        }
        Tensor::new(vec![indices.len(), c, h, w], out)
    }

    /// Tensor of every sample in storage order.
    pub fn full_tensor(&self, norm: &Normalization) -> Result<Tensor> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.tensor(&all, norm)
    }
}

/// Per-channel affine normalization in raw pixel units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Channel statistics over a whole dataset, accumulated in f64.
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Data(format!("{}: cannot compute statistics of an empty dataset", ds.name)));
        }
        let c = ds.channels;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (i, &p) in ds.images.iter().enumerate() {
            let v = p as f64;
            sum[i % c] += v;
            sq[i % c] += v * v;
        }
        let count = (ds.images.len() / c) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| ((q / count - m * m).max(0.0).sqrt()).max(1e-3) as f32).collect();
        Ok(Normalization { mean: mean.iter().map(|&m| m as f32).collect(), std })
    }

    fn check(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::Data(format!("normalization has {} channels, data has {}", self.mean.len(), channels)));
        }
        if self.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Data("normalization std must be positive".into()));
        }
        Ok(())
    }

    pub fn normalize(&self, pixel: u8, channel: usize) -> f32 {
        ((pixel as f64 - self.mean[channel] as f64) / self.std[channel] as f64) as f32
    }

    pub fn denormalize(&self, value: f32, channel: usize) -> f32 {
        (value as f64 * self.std[channel] as f64 + self.mean[channel] as f64) as f32
    }

    /// Inverse of [`Normalization::normalize`] back onto the byte grid.
    pub fn denormalize_pixel(&self, value: f32, channel: usize) -> u8 {
        self.denormalize(value, channel).round().clamp(0.0, 255.0) as u8
    }
}
