use rand::seq::SliceRandom;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augment {
    None,
    /// Zero-pad by four pixels, crop back at a random offset, flip
    /// horizontally with probability one half.
    CropFlip,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub shuffle: bool,
    pub augment: Augment,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
    pub epoch: usize,
}

/// Endless stream of batches. Each epoch covers every sample exactly once;
/// the last batch of an epoch may be short.
pub struct BatchIter<'a> {
    ds: &'a Dataset,
    norm: Normalization,
    cfg: BatchConfig,
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
    shuffle_rng: ChaCha8Rng,
    augment_rng: ChaCha8Rng,
}

const PAD: usize = 4;

impl<'a> BatchIter<'a> {
    pub fn new(ds: &'a Dataset, norm: &Normalization, cfg: BatchConfig) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Data(format!("{}: cannot batch an empty dataset", ds.name)));
        }
        if cfg.batch_size == 0 || cfg.batch_size > ds.len() {
            return Err(Error::Config(format!("batch size {} must be in 1..={}", cfg.batch_size, ds.len())));
        }
        let mut it = BatchIter {
            ds,
            norm: norm.clone(),
            cfg,
            order: (0..ds.len()).collect(),
            pos: 0,
            epoch: 0,
            shuffle_rng: seeds::stream(cfg.seed, "shuffle"),
            augment_rng: seeds::stream(cfg.seed, "augment"),
        };
        it.reshuffle();
        Ok(it)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.ds.len().div_ceil(self.cfg.batch_size)
    }

    fn reshuffle(&mut self) {
        if self.cfg.shuffle {
            self.order.shuffle(&mut self.shuffle_rng);
        }
    }

    fn materialize(&mut self, indices: &[usize]) -> Result<Tensor> {
        let mut t = self.ds.tensor(indices, &self.norm)?;
        if self.cfg.augment == Augment::CropFlip {
            let [n, c, h, w] = t.dims4("augment")?;
            let plane = h * w;
            let data = t.data_mut();
            for s in 0..n {
                let dy = self.augment_rng.random_range(0..=2 * PAD) as isize - PAD as isize;
                let dx = self.augment_rng.random_range(0..=2 * PAD) as isize - PAD as isize;
                let flip = self.augment_rng.random_bool(0.5);
                for ch in 0..c {
                    let src = data[(s * c + ch) * plane..(s * c + ch + 1) * plane].to_vec();
                    // padding holds raw pixel zero, expressed in normalized units
                    let zero = self.norm.normalize(0, ch);
                    let dst = &mut data[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                    for y in 0..h {
                        for x in 0..w {
                            let xs = if flip { w - 1 - x } else { x };
                            let sy = y as isize + dy;
                            let sx = xs as isize + dx;
                            dst[y * w + x] = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                src[sy as usize * w + sx as usize]
                            } else {
                                zero
                            };
                        }
                    }
                }
            }
        }
        Ok(t)
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        if self.pos >= self.order.len() {
            self.pos = 0;
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.pos + self.cfg.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let images = self.materialize(&indices)?;
        Ok(Batch { labels: self.ds.labels_usize(&indices), images, indices, epoch: self.epoch })
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}
