#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use ternary_dit::diffusion::gaussian_image;
use ternary_dit::params::Role;
use ternary_dit::{DiT, Image, ModelConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny(adaln_rms: bool, quantize: bool) -> ModelConfig {
    ModelConfig { adaln_rms, quantize_blocks: quantize, ..ModelConfig::tiny() }
}

/// Replaces every parameter with `N(0, std²)` draws (gains around 1, `α`
/// positive) so that no path through the model is switched off.
pub fn randomize<R: Rng>(model: &mut DiT<f64>, std: f64, rng: &mut R) {
    for (_, p) in model.params.iter_mut() {
        for v in &mut p.data {
            let z: f64 = StandardNormal.sample(rng);
            *v = match p.role {
                Role::Gain => 1.0 + 0.2 * z,
                Role::Alpha => 0.2 + 0.1 * rng.random::<f64>(),
                _ => std * z,
            };
        }
    }
}

/// A batch of inputs plus a fixed linear read-out `w` defining the scalar
/// loss `L = Σ w · prediction`.
pub struct Probe {
    pub x: Vec<Image<f64>>,
    pub t: Vec<usize>,
    pub labels: Vec<usize>,
    pub drop: Vec<bool>,
    pub w: Vec<Image<f64>>,
}

impl Probe {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let s = cfg.image_size;
        let x = (0..2).map(|_| gaussian_image(cfg.channels, s, s, rng)).collect();
        let w = (0..2).map(|_| gaussian_image(cfg.channels, s, s, rng)).collect();
        Self { x, t: vec![17, 640], labels: vec![1, 3], drop: vec![false, true], w }
    }

    pub fn loss(&self, model: &DiT<f64>) -> f64 {
        self.loss_at(model, &self.x)
    }

    pub fn loss_at(&self, model: &DiT<f64>, x: &[Image<f64>]) -> f64 {
        let y = model.predict(x, &self.t, &self.labels, &self.drop).unwrap();
        y.iter().zip(&self.w).map(|(a, b)| a.data.iter().zip(&b.data).map(|(p, q)| p * q).sum::<f64>()).sum()
    }
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}
