mod common;

use std::cell::Cell;

use common::{randomize, rng, tiny};
use rand_distr::{Distribution, StandardNormal};
use ternary_dit::diffusion::{
    ddpm_sample, ddpm_sample_with, gaussian_image, q_sample, training_loss, Denoiser, NoiseSchedule,
};
use ternary_dit::{DiT, Image, ModelConfig, Result};

/// Wraps a denoiser and counts evaluations per branch.
struct Counting<'a, D> {
    inner: &'a D,
    cond: Cell<usize>,
    uncond: Cell<usize>,
}

impl<'a, D: Denoiser<f64>> Denoiser<f64> for Counting<'a, D> {
    fn predict_noise(&self, x: &[Image<f64>], t: &[usize], l: &[usize], drop: &[bool]) -> Result<Vec<Image<f64>>> {
        for &d in drop {
            let c = if d { &self.uncond } else { &self.cond };
            c.set(c.get() + 1);
        }
        self.inner.predict_noise(x, t, l, drop)
    }
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn image_shape(&self) -> (usize, usize, usize) {
        self.inner.image_shape()
    }
}

/// Knows the clean image and returns the exact noise in any `x_t`.
struct Oracle<'a> {
    sched: &'a NoiseSchedule,
    x0: &'a [Image<f64>],
}

impl Denoiser<f64> for Oracle<'_> {
    fn predict_noise(&self, x: &[Image<f64>], t: &[usize], _: &[usize], _: &[bool]) -> Result<Vec<Image<f64>>> {
        Ok(x.iter()
            .zip(t)
            .zip(self.x0)
            .map(|((xt, &t), x0)| {
                let ab = self.sched.alpha_bar(t);
                let data = xt.data.iter().zip(&x0.data).map(|(a, b)| (a - ab.sqrt() * b) / (1.0 - ab).sqrt()).collect();
                Image { data, ..xt.clone() }
            })
            .collect())
    }
    fn num_classes(&self) -> usize {
        8
    }
    fn image_shape(&self) -> (usize, usize, usize) {
        self.x0[0].shape()
    }
}

struct Zero;

impl Denoiser<f64> for Zero {
    fn predict_noise(&self, x: &[Image<f64>], _: &[usize], _: &[usize], _: &[bool]) -> Result<Vec<Image<f64>>> {
        Ok(x.iter().map(|i| Image::zeros(i.channels, i.height, i.width)).collect())
    }
    fn num_classes(&self) -> usize {
        8
    }
    fn image_shape(&self) -> (usize, usize, usize) {
        (3, 4, 4)
    }
}

fn random_tiny() -> DiT<f64> {
    let mut m = DiT::<f64>::new(tiny(true, true), &mut rng(0)).unwrap();
    randomize(&mut m, 0.3, &mut rng(1));
    m
}

#[test]
fn sampler_counts_model_evaluations() {
    let model = random_tiny();
    let sched = NoiseSchedule::default();
    for (steps, guidance) in [(10, None), (10, Some(3.0)), (7, Some(1.0)), (1, None)] {
        let c = Counting { inner: &model, cond: Cell::new(0), uncond: Cell::new(0) };
        ddpm_sample(&c, &sched, 2, steps, guidance, &mut rng(5)).unwrap();
        assert_eq!(c.cond.get(), steps);
        assert_eq!(c.uncond.get(), if guidance.is_some() { steps } else { 0 });
    }
}

#[test]
fn unit_guidance_equals_conditional_sampling() {
    let model = random_tiny();
    let sched = NoiseSchedule::default();
    let mut a = Vec::new();
    let mut b = Vec::new();
    let xa = ddpm_sample_with(&model, &sched, 4, 25, Some(1.0), &mut rng(8), |_, x| a.push(x.clone())).unwrap();
    let xb = ddpm_sample_with(&model, &sched, 4, 25, None, &mut rng(8), |_, x| b.push(x.clone())).unwrap();
    assert_eq!(a, b);
    assert_eq!(xa, xb);
    assert_ne!(ddpm_sample(&model, &sched, 4, 25, Some(4.0), &mut rng(8)).unwrap(), xa);
}

#[test]
fn sampler_is_deterministic_and_validates() {
    let model = random_tiny();
    let sched = NoiseSchedule::default();
    let a = ddpm_sample(&model, &sched, 1, 20, Some(4.0), &mut rng(3)).unwrap();
    assert_eq!(a, ddpm_sample(&model, &sched, 1, 20, Some(4.0), &mut rng(3)).unwrap());
    assert_ne!(a, ddpm_sample(&model, &sched, 1, 20, Some(4.0), &mut rng(4)).unwrap());
    assert!(ddpm_sample(&model, &sched, 8, 20, None, &mut rng(3)).is_err());
    assert!(ddpm_sample(&model, &sched, 0, 1001, None, &mut rng(3)).is_err());
    assert!(ddpm_sample(&model, &sched, 0, 20, Some(0.5), &mut rng(3)).is_err());
}

/// Textbook ancestral loop over every timestep, written against the
/// schedule's betas directly.
fn reference_loop<D: Denoiser<f64>>(model: &D, sched: &NoiseSchedule, label: usize, seed: u64) -> Image<f64> {
    let mut r = rng(seed);
    let (c, h, w) = model.image_shape();
    let mut x: Image<f64> = gaussian_image(c, h, w, &mut r);
    for t in (0..sched.len()).rev() {
        let eps = model.predict_noise(&[x.clone()], &[t], &[label], &[false]).unwrap().remove(0);
        let (ab, beta) = (sched.alpha_bar(t), sched.beta(t));
        let ab_prev = if t > 0 { sched.alpha_bar(t - 1) } else { 1.0 };
        for (v, e) in x.data.iter_mut().zip(&eps.data) {
            let x0 = ((*v - (1.0 - ab).sqrt() * e) / ab.sqrt()).clamp(-1.0, 1.0);
            let mean =
                ab_prev.sqrt() * beta / (1.0 - ab) * x0 + (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab) * *v;
            *v = if t > 0 {
                let z: f64 = StandardNormal.sample(&mut r);
                mean + beta.sqrt() * z
            } else {
                mean
            };
        }
    }
    x
}

#[test]
fn full_length_sampling_matches_reference_loop() {
    let model = random_tiny();
    let sched = NoiseSchedule::default();
    let ours = ddpm_sample(&model, &sched, 6, 1000, None, &mut rng(77)).unwrap();
    let theirs = reference_loop(&model, &sched, 6, 77);
    for (a, b) in ours.data.iter().zip(&theirs.data) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn long_sampling_stays_finite() {
    let model = DiT::<f32>::new(ModelConfig::toy(), &mut rng(0)).unwrap();
    let sched = NoiseSchedule::default();
    let img = ddpm_sample(&model, &sched, 3, 250, Some(4.0), &mut rng(1)).unwrap();
    assert!(img.is_finite());
    assert!(img.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    let x = ddpm_sample(&random_tiny(), &sched, 3, 250, Some(10.0), &mut rng(1)).unwrap();
    assert!(x.is_finite());
}

#[test]
fn training_loss_oracles() {
    let sched = NoiseSchedule::default();
    let mut r = rng(2);
    let x0: Vec<Image<f64>> = (0..16).map(|_| gaussian_image(3, 4, 4, &mut r)).collect();
    let labels = vec![0; 16];
    let exact = training_loss(&Oracle { sched: &sched, x0: &x0 }, &sched, &x0, &labels, 0.1, &mut rng(3)).unwrap();
    assert!((0.0..1e-20).contains(&exact), "{exact}");

    // E[z²] = 1 per element; 64 batches × 16 images × 48 elements
    let mut r = rng(4);
    let mut total = 0.0;
    for _ in 0..64 {
        let l = training_loss(&Zero, &sched, &x0, &labels, 0.1, &mut r).unwrap();
        assert!(l >= 0.0);
        total += l;
    }
    let mean = total / 64.0;
    let se = (2.0 / (64.0 * 16.0 * 48.0f64)).sqrt();
    assert!((mean - 1.0).abs() < 4.0 * se, "{mean}");
}

#[test]
fn q_sample_moments_match_closed_form() {
    let sched = NoiseSchedule::default();
    let x0 = Image::from_vec(1, 1, 4, vec![0.9f64, -0.4, 0.0, -1.0]).unwrap();
    let t = 300;
    let n = 10_000;
    let mut r = rng(6);
    let mut sum = [0.0; 4];
    let mut sq = [0.0; 4];
    for _ in 0..n {
        let noise = gaussian_image(1, 1, 4, &mut r);
        let x = q_sample(&sched, &x0, t, &noise).unwrap();
        for i in 0..4 {
            sum[i] += x.data[i];
            sq[i] += x.data[i] * x.data[i];
        }
    }
    let ab = sched.alpha_bar(t);
    let var = 1.0 - ab;
    for i in 0..4 {
        let mean = sum[i] / n as f64;
        let sample_var = (sq[i] - n as f64 * mean * mean) / (n - 1) as f64;
        let se_mean = (var / n as f64).sqrt();
        let se_var = var * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - ab.sqrt() * x0.data[i]).abs() < 3.0 * se_mean, "pixel {i} mean {mean}");
        assert!((sample_var - var).abs() < 3.0 * se_var, "pixel {i} var {sample_var}");
    }
}
