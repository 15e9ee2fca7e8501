use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Difficulty, Split};
use crate::error::{Error, Result};
use crate::seeds;

const SIDE: usize = 16;
const SUPERSAMPLE: usize = 4;
const BLUR_SIGMA: f64 = 1.2;
const NOISE_STD: f64 = 14.0;

/// Two-class 16×16 greyscale shapes: class 0 is a filled square, class 1 a
/// filled disk of similar area. Samples alternate class and, within each
/// class, alternate between a sharp high-contrast rendering (easy) and a
/// blurred, low-contrast, noisy one (hard).
pub fn synthetic_easy_hard(n: usize, seed: u64) -> Result<Dataset> {
    synthetic_with(n, seed, Split::Train)
}

/// Training and held-out synthetic splits from independent streams.
pub fn synthetic_splits(train: usize, test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    Ok((synthetic_with(train, seed, Split::Train)?, synthetic_with(test, seed, Split::Test)?))
}

fn synthetic_with(n: usize, seed: u64, split: Split) -> Result<Dataset> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::Config(format!("synthetic dataset size must be even and positive, got {}", n)));
    }
    let stream = match split {
        Split::Train => "synthetic.train",
        Split::Test => "synthetic.test",
    };
    let mut rng = seeds::stream(seed, stream);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut images = Vec::with_capacity(n * SIDE * SIDE);
    let mut labels = Vec::with_capacity(n);
    let mut difficulty = Vec::with_capacity(n);
    for i in 0..n {
        let class = (i % 2) as u8;
        let diff = if (i / 2) % 2 == 0 { Difficulty::Easy } else { Difficulty::Hard };
        images.extend(render(class, diff, &mut rng, &noise));
        labels.push(class);
        difficulty.push(diff);
    }
    let mut ds = Dataset::new("synthetic", split, [SIDE, SIDE, 1], 2, images, labels)?;
    ds.difficulty = Some(difficulty);
    Ok(ds)
}

fn render(class: u8, diff: Difficulty, rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> Vec<u8> {
    let area: f64 = rng.random_range(30.0..70.0);
    let cx: f64 = rng.random_range(6.0..10.0);
    let cy: f64 = rng.random_range(6.0..10.0);
    let half = area.sqrt() / 2.0;
    let radius = (area / std::f64::consts::PI).sqrt();
    let inside = |x: f64, y: f64| match class {
        0 => (x - cx).abs() <= half && (y - cy).abs() <= half,
        _ => (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius,
    };
    let mut coverage = vec![0.0f64; SIDE * SIDE];
    let step = 1.0 / SUPERSAMPLE as f64;
    for py in 0..SIDE {
        for px in 0..SIDE {
            let mut hit = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) * step;
                    let y = py as f64 + (sy as f64 + 0.5) * step;
                    hit += inside(x, y) as usize;
                }
            }
            coverage[py * SIDE + px] = hit as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        }
    }
    let (bg, fg) = match diff {
        Difficulty::Easy => (rng.random_range(10.0..40.0), rng.random_range(200.0..245.0)),
        Difficulty::Hard => (rng.random_range(80.0..105.0), rng.random_range(140.0..165.0)),
    };
    let mut pix: Vec<f64> = coverage.iter().map(|&c| bg + (fg - bg) * c).collect();
    if diff == Difficulty::Hard {
        pix = gaussian_blur(&pix, BLUR_SIGMA);
        for p in pix.iter_mut() {
            *p += noise.sample(rng);
        }
    }
    pix.iter().map(|&p| p.round().clamp(0.0, 255.0) as u8).collect()
}

/// Separable blur with edge clamping.
fn gaussian_blur(img: &[f64], sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    let at = |i: isize| i.clamp(0, SIDE as isize - 1) as usize;
    let mut tmp = vec![0.0; SIDE * SIDE];
    for y in 0..SIDE {
        for x in 0..SIDE {
            tmp[y * SIDE + x] =
                (-r..=r).map(|d| kernel[(d + r) as usize] * img[y * SIDE + at(x as isize + d)]).sum::<f64>() / total;
        }
    }
    let mut out = vec![0.0; SIDE * SIDE];
    for y in 0..SIDE {
        for x in 0..SIDE {
            out[y * SIDE + x] =
                (-r..=r).map(|d| kernel[(d + r) as usize] * tmp[at(y as isize + d) * SIDE + x]).sum::<f64>() / total;
        }
    }
    out
}
