//! Synthetic segmentation data, noise injection, metrics and PNG IO.

mod io;
pub mod metrics;

pub use io::{load_image_dir, save_sample_png};
pub use metrics::{accuracy, average_hausdorff, binarize, dice, evaluate, MetricReport};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An image in `[0,1]` with its binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    /// `[C,H,W]`
    pub image: Tensor,
    /// `[1,H,W]`, values in `{0,1}`
    pub mask: Tensor,
}

impl SegSample {
    pub fn new(image: Tensor, mask: Tensor) -> Result<Self> {
        if image.ndim() != 3 || mask.ndim() != 3 || mask.shape()[0] != 1 {
            return Err(Error::shape(
                "segmentation sample",
                format!("image {:?}, mask {:?}", image.shape(), mask.shape()),
            ));
        }
        if image.shape()[1..] != mask.shape()[1..] {
            return Err(Error::shape(
                "segmentation sample",
                format!("image {:?} vs mask {:?}", image.shape(), mask.shape()),
            ));
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Config("mask is not binary".into()));
        }
        Ok(SegSample { image, mask })
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }
}

/// Inclusive range of ellipses drawn per image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobCount {
    pub min: usize,
    pub max: usize,
}

impl Default for BlobCount {
    fn default() -> Self {
        BlobCount { min: 1, max: 3 }
    }
}

const SUPERSAMPLE: usize = 4;

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Grayscale images of bright anti-aliased ellipses on a darker textured
/// background. The mask marks pixels whose centre lies inside an ellipse.
pub fn synth_blobs(n: usize, size: usize, blobs: BlobCount, seed: u64) -> Result<Vec<SegSample>> {
    if size == 0 || size % 16 != 0 {
        return Err(Error::Config(format!("image size {size} is not a positive multiple of 16")));
    }
    if blobs.min == 0 || blobs.min > blobs.max {
        return Err(Error::Config(format!("invalid blob count range {}..={}", blobs.min, blobs.max)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| draw_sample(size, blobs, &mut rng)).collect()
}

fn draw_sample(size: usize, blobs: BlobCount, rng: &mut ChaCha8Rng) -> Result<SegSample> {
    let s = size as f64;
    let count = rng.gen_range(blobs.min..=blobs.max);
    let ellipses: Vec<Ellipse> = (0..count)
        .map(|_| {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            Ellipse {
                cx: rng.gen_range(0.15..0.85) * s,
                cy: rng.gen_range(0.15..0.85) * s,
                a: rng.gen_range(0.08..0.2) * s,
                b: rng.gen_range(0.08..0.2) * s,
                cos: theta.cos(),
                sin: theta.sin(),
            }
        })
        .collect();
    let fg: f64 = rng.gen_range(0.65..0.9);
    let base: f64 = rng.gen_range(0.15..0.3);
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.gen_range(0.03..0.06),
                rng.gen_range(0.1..0.5),
                rng.gen_range(0.1..0.5),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();

    let mut image = vec![0.0; size * size];
    let mut mask = vec![0.0; size * size];
    let sub = 1.0 / SUPERSAMPLE as f64;
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut covered = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let qx = x as f64 + (sx as f64 + 0.5) * sub;
                    let qy = y as f64 + (sy as f64 + 0.5) * sub;
                    if ellipses.iter().any(|e| e.contains(qx, qy)) {
                        covered += 1;
                    }
                }
            }
            let coverage = covered as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            let texture: f64 = waves
                .iter()
                .map(|(amp, fx, fy, ph)| amp * (fx * px + fy * py + ph).sin())
                .sum::<f64>()
                + rng.gen_range(-0.04..0.04);
            let bg = base + texture;
            let i = y * size + x;
            image[i] = (bg * (1.0 - coverage) + fg * coverage).clamp(0.0, 1.0);
            if ellipses.iter().any(|e| e.contains(px, py)) {
                mask[i] = 1.0;
            }
        }
    }
    SegSample::new(
        Tensor::new([1, size, size], image)?,
        Tensor::new([1, size, size], mask)?,
    )
}

/// Zero-mean Gaussian noise of standard deviation `sigma`, before clamping.
pub fn gaussian_noise(shape: &[usize], sigma: f64, seed: u64) -> Result<Tensor> {
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma must be non-negative, got {sigma}")));
    }
    let numel = shape.iter().product();
    if sigma == 0.0 {
        return Tensor::new(shape.to_vec(), vec![0.0; numel]);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(shape.to_vec(), (0..numel).map(|_| normal.sample(&mut rng)).collect())
}

/// `clamp(image + N(0, σ²), 0, 1)`.
pub fn add_gaussian_noise(image: &Tensor, sigma: f64, seed: u64) -> Result<Tensor> {
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let noise = gaussian_noise(image.shape(), sigma, seed)?;
    let data = image
        .data()
        .iter()
        .zip(noise.data())
        .map(|(x, n)| (x + n).clamp(0.0, 1.0))
        .collect();
    Tensor::new(image.shape().to_vec(), data)
}

/// Seeded shuffle, then the first `round(0.8·n)` indices train and the rest validate.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n * 4 + 2) / 5;
    let val = idx.split_off(n_train);
    (idx, val)
}

/// Train/validation partition of `samples` per [`split_indices`].
pub fn train_val_split(samples: &[SegSample], seed: u64) -> (Vec<SegSample>, Vec<SegSample>) {
    let (tr, va) = split_indices(samples.len(), seed);
    let pick = |ix: &[usize]| ix.iter().map(|&i| samples[i].clone()).collect();
    (pick(&tr), pick(&va))
}

/// Copies of `samples` with noise added to every image; sample `i` uses seed `seed + i`.
pub fn noisy_copies(samples: &[SegSample], sigma: f64, seed: u64) -> Result<Vec<SegSample>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(SegSample {
                image: add_gaussian_noise(&s.image, sigma, seed.wrapping_add(i as u64))?,
                mask: s.mask.clone(),
            })
        })
        .collect()
}
