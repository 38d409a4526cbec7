use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{LevitError, Result};
use crate::tensor::{Element, Tensor};

/// Oriented-stripe images: class `k` of `K` is a sinusoidal grating at angle
/// `k * pi / K` with a random phase, plus uniform noise whose amplitude stays
/// below the grating contrast.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub num_classes: usize,
    pub img_size: usize,
    pub seed: u64,
    images: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl SyntheticDataset {
    pub const CHANNELS: usize = 3;
    pub const PERIOD: f64 = 8.0;
    pub const CONTRAST: f64 = 0.3;
    pub const NOISE: f64 = 0.15;

    pub fn new(num_classes: usize, samples: usize, img_size: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(LevitError::config("num_classes", "need at least two classes"));
        }
        if samples == 0 || !samples.is_multiple_of(num_classes) {
            return Err(LevitError::config("samples", format!("must be a positive multiple of {num_classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::with_capacity(samples);
        let mut labels = Vec::with_capacity(samples);
        for i in 0..samples {
            let label = i % num_classes;
            images.push(Self::render(label, num_classes, img_size, &mut rng));
            labels.push(label);
        }
        Ok(Self { num_classes, img_size, seed, images, labels })
    }

    fn render(label: usize, classes: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let theta = label as f64 * PI / classes as f64;
        let (c, s) = (theta.cos(), theta.sin());
        let phase = rng.random::<f64>() * 2.0 * PI;
        let tint: [f64; 3] = std::array::from_fn(|_| 0.8 + 0.2 * rng.random::<f64>());
        let mut out = Vec::with_capacity(Self::CHANNELS * size * size);
        for ch in tint {
            for y in 0..size {
                for x in 0..size {
                    let wave = (2.0 * PI * (x as f64 * c + y as f64 * s) / Self::PERIOD + phase).cos();
                    let noise = (rng.random::<f64>() * 2.0 - 1.0) * Self::NOISE;
                    out.push((0.5 + ch * Self::CONTRAST * wave + noise).clamp(0.0, 1.0));
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i]
    }

    /// Stacks the chosen samples into a `(B, 3, S, S)` tensor.
    pub fn batch<E: Element>(&self, indices: &[usize]) -> (Tensor<E>, Vec<usize>) {
        let per = Self::CHANNELS * self.img_size * self.img_size;
        let data = indices.iter().flat_map(|&i| self.images[i].iter().map(|&v| E::from_f64(v))).collect::<Vec<_>>();
        debug_assert_eq!(data.len(), indices.len() * per);
        let images =
            Tensor::new(&[indices.len(), Self::CHANNELS, self.img_size, self.img_size], data).expect("sizes agree");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }
}
