//! DDPM forward corruption, the noise-prediction loss, ancestral sampling
//! and classifier-free guidance.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::DiT;
use crate::real::Real;
use crate::tensor::Image;

/// Linear-β DDPM schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 2e-2)
    }
}

impl NoiseSchedule {
    /// `steps` betas spaced linearly from `start` to `end`.
    pub fn linear(steps: usize, start: f64, end: f64) -> Self {
        assert!(steps >= 1 && 0.0 < start && start <= end && end < 1.0);
        let betas: Vec<f64> = if steps == 1 {
            vec![start]
        } else {
            (0..steps).map(|i| start + (end - start) * i as f64 / (steps - 1) as f64).collect()
        };
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Self { betas, alpha_bar }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::Domain(format!("timestep {t} outside [0, {})", self.len())));
        }
        Ok(())
    }

    /// Timesteps visited by a `steps`-step sampler, ascending:
    /// `⌊i·T/steps⌋` for `i = 0..steps`.
    pub fn strided_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.len() {
            return Err(Error::Domain(format!("steps {steps} outside [1, {}]", self.len())));
        }
        Ok((0..steps).map(|i| i * self.len() / steps).collect())
    }
}

/// Standard-normal image.
pub fn gaussian_image<T: Real, R: Rng + ?Sized>(c: usize, h: usize, w: usize, rng: &mut R) -> Image<T> {
    let data = (0..c * h * w)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(z)
        })
        .collect();
    Image { channels: c, height: h, width: w, data }
}

/// `x_t = sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·noise`.
pub fn q_sample<T: Real>(sched: &NoiseSchedule, x0: &Image<T>, t: usize, noise: &Image<T>) -> Result<Image<T>> {
    sched.check(t)?;
    if x0.shape() != noise.shape() {
        return Err(Error::Shape(format!("x0 {:?} vs noise {:?}", x0.shape(), noise.shape())));
    }
    let a = T::from_f64_lossy(sched.alpha_bar(t).sqrt());
    let s = T::from_f64_lossy((1.0 - sched.alpha_bar(t)).sqrt());
    let data = x0.data.iter().zip(&noise.data).map(|(&x, &e)| a * x + s * e).collect();
    Ok(Image { data, ..x0.clone() })
}

/// `eps_uncond + s·(eps_cond − eps_uncond)`, evaluated as
/// `s·eps_cond + (1 − s)·eps_uncond` so that `s = 1` and `s = 0` return
/// the corresponding branch exactly.
pub fn cfg_combine<T: Real>(eps_cond: &Image<T>, eps_uncond: &Image<T>, s: f64) -> Result<Image<T>> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", eps_cond.shape(), eps_uncond.shape())));
    }
    let (w_c, w_u) = (T::from_f64_lossy(s), T::from_f64_lossy(1.0 - s));
    let data = eps_cond.data.iter().zip(&eps_uncond.data).map(|(&c, &u)| w_c * c + w_u * u).collect();
    Ok(Image { data, ..eps_cond.clone() })
}

/// Anything that predicts the noise in a batch of noised images.
pub trait Denoiser<T> {
    fn predict_noise(&self, x_t: &[Image<T>], t: &[usize], labels: &[usize], drop: &[bool]) -> Result<Vec<Image<T>>>;
    fn num_classes(&self) -> usize;
    /// `(channels, height, width)`.
    fn image_shape(&self) -> (usize, usize, usize);
}

impl<T: Real> Denoiser<T> for DiT<T> {
    fn predict_noise(&self, x_t: &[Image<T>], t: &[usize], labels: &[usize], drop: &[bool]) -> Result<Vec<Image<T>>> {
        self.predict(x_t, t, labels, drop)
    }

    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn image_shape(&self) -> (usize, usize, usize) {
        let c = self.config();
        (c.channels, c.image_size, c.image_size)
    }
}

/// A batch corrupted for one training step.
#[derive(Clone, Debug)]
pub struct NoisedBatch<T> {
    pub x_t: Vec<Image<T>>,
    pub t: Vec<usize>,
    pub noise: Vec<Image<T>>,
    pub drop: Vec<bool>,
}

/// Draws `t ~ U[0, T)`, standard-normal noise and label-drop flags for
/// every image, in that order per image.
pub fn noise_batch<T: Real, R: Rng + ?Sized>(
    sched: &NoiseSchedule,
    x0: &[Image<T>],
    class_dropout_prob: f64,
    rng: &mut R,
) -> Result<NoisedBatch<T>> {
    let mut out = NoisedBatch { x_t: Vec::new(), t: Vec::new(), noise: Vec::new(), drop: Vec::new() };
    for img in x0 {
        let t = rng.random_range(0..sched.len());
        let noise = gaussian_image(img.channels, img.height, img.width, rng);
        let drop = class_dropout_prob > 0.0 && rng.random::<f64>() < class_dropout_prob;
        out.x_t.push(q_sample(sched, img, t, &noise)?);
        out.t.push(t);
        out.noise.push(noise);
        out.drop.push(drop);
    }
    Ok(out)
}

/// Mean squared error over every element of every image.
pub fn mse<T: Real>(pred: &[Image<T>], target: &[Image<T>]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, q) in pred.iter().zip(target) {
        for (&a, &b) in p.data.iter().zip(&q.data) {
            let d = (a - b).to_f64_lossy();
            sum += d * d;
        }
        count += p.data.len();
    }
    sum / count.max(1) as f64
}

/// Noise-prediction loss on one batch with freshly drawn timesteps, noise
/// and label dropout.
pub fn training_loss<T: Real, D: Denoiser<T> + ?Sized, R: Rng + ?Sized>(
    model: &D,
    sched: &NoiseSchedule,
    x0: &[Image<T>],
    labels: &[usize],
    class_dropout_prob: f64,
    rng: &mut R,
) -> Result<f64> {
    let batch = noise_batch(sched, x0, class_dropout_prob, rng)?;
    let pred = model.predict_noise(&batch.x_t, &batch.t, labels, &batch.drop)?;
    Ok(mse(&pred, &batch.noise))
}

/// Ancestral DDPM sampling over `steps` uniformly strided timesteps.
///
/// With `cfg_scale = Some(s)` both the conditional and the unconditional
/// branch are evaluated at every step and combined by [`cfg_combine`];
/// `None` runs the conditional branch only. The reverse variance is the
/// (respaced) `β_t`, the predicted `x0` is clipped to `[−1, 1]`, and no
/// noise is added on the final step.
pub fn ddpm_sample<T: Real, D: Denoiser<T> + ?Sized, R: Rng + ?Sized>(
    model: &D,
    sched: &NoiseSchedule,
    label: usize,
    steps: usize,
    cfg_scale: Option<f64>,
    rng: &mut R,
) -> Result<Image<T>> {
    ddpm_sample_with(model, sched, label, steps, cfg_scale, rng, |_, _| {})
}

/// [`ddpm_sample`] with a hook that sees `(step_index, x)` after each
/// update.
pub fn ddpm_sample_with<T: Real, D: Denoiser<T> + ?Sized, R: Rng + ?Sized>(
    model: &D,
    sched: &NoiseSchedule,
    label: usize,
    steps: usize,
    cfg_scale: Option<f64>,
    rng: &mut R,
    mut on_step: impl FnMut(usize, &Image<T>),
) -> Result<Image<T>> {
    if label >= model.num_classes() {
        return Err(Error::Domain(format!("class {label} outside [0, {})", model.num_classes())));
    }
    if let Some(s) = cfg_scale {
        if !(s >= 1.0 && s.is_finite()) {
            return Err(Error::Domain(format!("guidance scale must be >= 1, got {s}")));
        }
    }
    let ts = sched.strided_timesteps(steps)?;
    let (c, h, w) = model.image_shape();
    let mut x: Image<T> = gaussian_image(c, h, w, rng);
    for i in (0..ts.len()).rev() {
        let t = ts[i];
        let eps = match cfg_scale {
            None => model.predict_noise(std::slice::from_ref(&x), &[t], &[label], &[false])?.remove(0),
            Some(s) => {
                let cond = model.predict_noise(std::slice::from_ref(&x), &[t], &[label], &[false])?.remove(0);
                let uncond = model.predict_noise(std::slice::from_ref(&x), &[t], &[label], &[true])?.remove(0);
                cfg_combine(&cond, &uncond, s)?
            }
        };
        let ab = sched.alpha_bar(t);
        let ab_prev = if i > 0 { sched.alpha_bar(ts[i - 1]) } else { 1.0 };
        let beta = 1.0 - ab / ab_prev;
        let coef_x0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let coef_xt = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let (sa, s1a) = (ab.sqrt(), (1.0 - ab).sqrt());
        let sigma = beta.sqrt();
        for (xv, &e) in x.data.iter_mut().zip(&eps.data) {
            let xt = xv.to_f64_lossy();
            let x0 = ((xt - s1a * e.to_f64_lossy()) / sa).clamp(-1.0, 1.0);
            let mut next = coef_x0 * x0 + coef_xt * xt;
            if i > 0 {
                let z: f64 = StandardNormal.sample(rng);
                next += sigma * z;
            }
            *xv = T::from_f64_lossy(next);
        }
        on_step(i, &x);
    }
    Ok(x)
}
