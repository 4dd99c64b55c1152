//! Quantization-aware training: ternarize on forward, straight-through on
//! backward, AdamW on the full-precision masters, EMA shadow and smoothed
//! loss logging.

use std::io::Write;

use rand_chacha::ChaCha8Rng;

use crate::data::SyntheticDataset;
use crate::diffusion::{mse, noise_batch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::DiT;
use crate::params::{Grads, ParamStore, Role};
use crate::real::Real;
use crate::tensor::Image;

/// Smallest `α` an update may leave behind.
pub const ALPHA_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    pub lr_initial: f64,
    pub lr_after_drop: f64,
    pub lr_drop_step: u64,
    pub ema_decay: f64,
    pub smoothing: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Decoupled decay on projection weights; norms, embeddings and `α`
    /// are never decayed.
    pub weight_decay: f64,
    /// Global gradient-norm ceiling, if clipping is on.
    pub clip_grad: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            total_steps: 5000,
            lr_initial: 5e-4,
            lr_after_drop: 1e-4,
            lr_drop_step: 5000,
            ema_decay: 0.999,
            smoothing: 0.995,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            clip_grad: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (k, v) in [("lr", self.lr_initial), ("lr_after_drop", self.lr_after_drop)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if self.lr_drop_step > self.total_steps {
            return Err(Error::Config(format!(
                "lr_drop_step {} exceeds total_steps {}",
                self.lr_drop_step, self.total_steps
            )));
        }
        for (k, v) in
            [("ema_decay", self.ema_decay), ("smoothing", self.smoothing), ("beta1", self.beta1), ("beta2", self.beta2)]
        {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{k} must lie in [0, 1), got {v}")));
            }
        }
        if let Some(c) = self.clip_grad {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!("clip threshold must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// `lr_initial` before `lr_drop_step`, `lr_after_drop` from it on.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.lr_drop_step {
        cfg.lr_initial
    } else {
        cfg.lr_after_drop
    }
}

/// Exponential smoothing; the first observation is taken as is.
pub fn smoothed_loss(prev: Option<f64>, raw: f64, factor: f64) -> f64 {
    match prev {
        None => raw,
        Some(p) => factor * p + (1.0 - factor) * raw,
    }
}

#[derive(Clone, Debug)]
pub struct TrainState<T> {
    /// Full-precision masters, including every `α`.
    pub model: DiT<T>,
    pub ema: ParamStore<T>,
    m: Grads<T>,
    v: Grads<T>,
    /// Completed updates.
    pub step: u64,
    pub smoothed: Option<f64>,
    pub rng: ChaCha8Rng,
}

/// What one [`qat_step`] did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Index of the update, counted from 0.
    pub step: u64,
    pub loss: f64,
    pub smoothed: f64,
    pub lr: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

impl<T: Real> TrainState<T> {
    /// Fresh optimizer state around `model`; `rng` drives every later
    /// batch, timestep, noise and dropout draw.
    pub fn new(model: DiT<T>, rng: ChaCha8Rng) -> Self {
        let ema = model.params.clone();
        let m = Grads::zeros_like(&model.params);
        let v = m.clone();
        Self { model, ema, m, v, step: 0, smoothed: None, rng }
    }

    /// The model with its parameters replaced by the EMA shadow.
    pub fn ema_model(&self) -> DiT<T> {
        let mut m = self.model.clone();
        m.params = self.ema.clone();
        m
    }
}

/// One update on a batch of clean images and labels. Timesteps, noise and
/// label dropout are drawn from the state's generator.
pub fn qat_step<T: Real>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    images: &[Image<T>],
    labels: &[usize],
) -> Result<StepReport> {
    let dropout = state.model.config().class_dropout_prob;
    let batch = noise_batch(sched, images, dropout, &mut state.rng)?;
    let (pred, tape) = state.model.forward(&batch.x_t, &batch.t, labels, &batch.drop)?;
    let loss = mse(&pred, &batch.noise);
    if !loss.is_finite() {
        return Err(Error::Divergence { step: state.step, loss });
    }
    let numel: usize = pred.iter().map(|p| p.data.len()).sum();
    let k = T::from_f64_lossy(2.0 / numel as f64);
    let d_out: Vec<Image<T>> = pred
        .iter()
        .zip(&batch.noise)
        .map(|(p, e)| Image { data: p.data.iter().zip(&e.data).map(|(&a, &b)| k * (a - b)).collect(), ..p.clone() })
        .collect();
    let (mut grads, _) = state.model.backward(&tape, &d_out)?;
    let grad_norm = grads.global_norm();
    if !grad_norm.is_finite() {
        return Err(Error::Divergence { step: state.step, loss: grad_norm });
    }
    if let Some(c) = cfg.clip_grad {
        if grad_norm > c {
            grads.scale(T::from_f64_lossy(c / grad_norm));
        }
    }

    let lr = lr_at(state.step, cfg);
    let t = (state.step + 1) as i32;
    let (bc1, bc2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    let ids: Vec<_> = state.model.params.iter().map(|(id, p)| (id, p.role)).collect();
    for (id, role) in ids {
        let decay = match role {
            Role::Weight | Role::TernaryWeight => cfg.weight_decay,
            _ => 0.0,
        };
        let g = grads.get(id);
        let (m, v) = (state.m.get_mut(id), state.v.get_mut(id));
        let p = state.model.params.get_mut(id);
        for i in 0..p.len() {
            let gi = g[i].to_f64_lossy();
            let mi = cfg.beta1 * m[i].to_f64_lossy() + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v[i].to_f64_lossy() + (1.0 - cfg.beta2) * gi * gi;
            m[i] = T::from_f64_lossy(mi);
            v[i] = T::from_f64_lossy(vi);
            let mut pi = p[i].to_f64_lossy();
            pi -= lr * decay * pi;
            pi -= lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.adam_eps);
            if role == Role::Alpha {
                pi = pi.max(ALPHA_FLOOR);
            }
            p[i] = T::from_f64_lossy(pi);
        }
    }

    // e += (1 − d)(p − e): a shadow that already equals its master stays put
    let k = T::from_f64_lossy(1.0 - cfg.ema_decay);
    for ((_, e), (_, p)) in state.ema.iter_mut().zip(state.model.params.iter()) {
        if cfg.ema_decay == 0.0 {
            e.data.copy_from_slice(&p.data);
            continue;
        }
        for (ev, &pv) in e.data.iter_mut().zip(&p.data) {
            *ev += k * (pv - *ev);
        }
    }

    let smoothed = smoothed_loss(state.smoothed, loss, cfg.smoothing);
    state.smoothed = Some(smoothed);
    let report = StepReport { step: state.step, loss, smoothed, lr, grad_norm };
    state.step += 1;
    Ok(report)
}

/// Runs `steps` updates on batches drawn from `data` with the state's
/// generator, calling `on_step` after each one.
pub fn train_steps<T: Real>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    data: &SyntheticDataset,
    steps: u64,
    mut on_step: impl FnMut(&TrainState<T>, &StepReport) -> Result<()>,
) -> Result<()> {
    for _ in 0..steps {
        let (images, labels) = data.draw_batch(cfg.batch_size, &mut state.rng)?;
        let report = qat_step(state, cfg, sched, &images, &labels)?;
        on_step(state, &report)?;
    }
    Ok(())
}

/// Appends `step<TAB>raw<TAB>smoothed` lines.
pub struct LossLog<W: Write> {
    out: W,
}

impl<W: Write> LossLog<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn record(&mut self, r: &StepReport) -> Result<()> {
        writeln!(self.out, "{}\t{}\t{}", r.step, r.loss, r.smoothed)?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Parses a loss log back into `(step, raw, smoothed)` triples.
pub fn parse_loss_log(text: &str) -> Result<Vec<(u64, f64, f64)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Format(format!("bad loss log line {line:?}"));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok((f[0].parse().map_err(|_| bad())?, f[1].parse().map_err(|_| bad())?, f[2].parse().map_err(|_| bad())?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig { lr_drop_step: 300, total_steps: 1000, ..Default::default() };
        assert_eq!(lr_at(0, &cfg), 5e-4);
        assert_eq!(lr_at(299, &cfg), 5e-4);
        assert_eq!(lr_at(300, &cfg), 1e-4);
        let flat = TrainConfig { lr_drop_step: 1000, total_steps: 1000, ..Default::default() };
        assert!((0..1000).all(|s| lr_at(s, &flat) == 5e-4));
        let early = TrainConfig { lr_drop_step: 0, ..Default::default() };
        assert_eq!(lr_at(0, &early), 1e-4);
    }

    #[test]
    fn smoothing() {
        assert_eq!(smoothed_loss(None, 0.7, 0.995), 0.7);
        assert_eq!(smoothed_loss(Some(3.0), 0.7, 0.0), 0.7);
        assert!((smoothed_loss(Some(1.0), 0.0, 0.995) - 0.995).abs() < 1e-15);
        let mut s = None;
        for _ in 0..20000 {
            s = Some(smoothed_loss(s, 0.25, 0.995));
        }
        assert!((s.unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr_initial: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr_drop_step: 6000, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn loss_log_round_trip() {
        let mut log = LossLog::new(Vec::new());
        log.record(&StepReport { step: 0, loss: 1.25, smoothed: 1.25, lr: 5e-4, grad_norm: 1.0 }).unwrap();
        log.record(&StepReport { step: 1, loss: 0.5, smoothed: 1.24625, lr: 5e-4, grad_norm: 1.0 }).unwrap();
        let text = String::from_utf8(log.into_inner()).unwrap();
        assert_eq!(text, "0\t1.25\t1.25\n1\t0.5\t1.24625\n");
        assert_eq!(parse_loss_log(&text).unwrap()[1], (1, 0.5, 1.24625));
        assert!(parse_loss_log("1\t2").is_err());
    }
}
