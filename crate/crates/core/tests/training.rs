mod common;

use common::{rng, tiny};
use ternary_dit::data::SyntheticDataset;
use ternary_dit::diffusion::{mse, noise_batch, NoiseSchedule};
use ternary_dit::params::Role;
use ternary_dit::train::{qat_step, train_steps, LossLog, TrainConfig, TrainState, ALPHA_FLOOR};
use ternary_dit::{DiT, Error, Image};

fn setup(seed: u64) -> (TrainState<f64>, SyntheticDataset, NoiseSchedule) {
    let model = DiT::<f64>::new(tiny(true, true), &mut rng(seed)).unwrap();
    let state = TrainState::new(model, rng(seed + 1));
    (state, SyntheticDataset::new(8, 4, 3).unwrap(), NoiseSchedule::default())
}

fn batch(data: &SyntheticDataset, seed: u64) -> (Vec<Image<f64>>, Vec<usize>) {
    data.draw_batch(4, &mut rng(seed)).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (mut state, data, sched) = setup(0);
    let cfg = TrainConfig { lr_initial: 0.0, lr_after_drop: 0.0, ..TrainConfig::default() };
    let before = state.model.params.clone();
    let (x, l) = batch(&data, 1);
    for k in 0..3 {
        let r = qat_step(&mut state, &cfg, &sched, &x, &l).unwrap();
        assert_eq!(r.step, k);
        assert_eq!(r.lr, 0.0);
    }
    assert_eq!(state.step, 3);
    assert_eq!(state.model.params, before);
    assert_eq!(state.ema, before);
}

#[test]
fn first_update_matches_adam_oracle() {
    let (mut state, data, sched) = setup(10);
    let cfg = TrainConfig { batch_size: 4, ema_decay: 0.0, ..TrainConfig::default() };
    let (x, l) = batch(&data, 11);

    // replay the step's draws on a clone of the generator
    let mut r = state.rng.clone();
    let p = state.model.config().class_dropout_prob;
    let nb = noise_batch(&sched, &x, p, &mut r).unwrap();
    let (pred, tape) = state.model.forward(&nb.x_t, &nb.t, &l, &nb.drop).unwrap();
    let loss = mse(&pred, &nb.noise);
    let n = (pred.len() * pred[0].data.len()) as f64;
    let d: Vec<Image<f64>> = pred
        .iter()
        .zip(&nb.noise)
        .map(|(a, b)| Image { data: a.data.iter().zip(&b.data).map(|(p, q)| 2.0 * (p - q) / n).collect(), ..a.clone() })
        .collect();
    let (grads, _) = state.model.backward(&tape, &d).unwrap();
    let norm = grads.global_norm();
    let clip = if norm > 1.0 { 1.0 / norm } else { 1.0 };
    let before = state.model.clone();

    let report = qat_step(&mut state, &cfg, &sched, &x, &l).unwrap();
    assert_eq!(report.loss, loss);
    assert_eq!(report.smoothed, loss);
    assert!((report.grad_norm - norm).abs() <= 1e-12 * norm);

    // with bias correction the first Adam move is lr · g / (|g| + ε)
    for (id, p) in before.params.iter() {
        for (i, &w) in p.data.iter().enumerate() {
            let g = grads.get(id)[i] * clip;
            let mut expect = w - 5e-4 * g / (g.abs() + 1e-8);
            if p.role == Role::Alpha {
                expect = expect.max(ALPHA_FLOOR);
            }
            let got = state.model.params.get(id)[i];
            assert!((got - expect).abs() < 1e-12, "{}[{i}]: {got} vs {expect}", p.name);
        }
    }
    assert_eq!(state.ema, state.model.params);
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let (mut state, data, sched) = setup(20);
        let cfg = TrainConfig { batch_size: 4, ..TrainConfig::default() };
        let mut log = LossLog::new(Vec::new());
        train_steps(&mut state, &cfg, &sched, &data, 50, |_, r| log.record(r)).unwrap();
        (state.model.params, state.ema, log.into_inner())
    };
    let a = run();
    assert_eq!(a, run());
    assert_eq!(String::from_utf8(a.2).unwrap().lines().count(), 50);
}

#[test]
fn masters_stay_full_precision_and_alpha_positive() {
    let (mut state, data, sched) = setup(30);
    // a huge rate pushes every α toward the floor
    let cfg = TrainConfig { batch_size: 4, lr_initial: 1.0, clip_grad: None, ..TrainConfig::default() };
    let before = state.model.params.clone();
    train_steps(&mut state, &cfg, &sched, &data, 5, |_, _| Ok(())).unwrap();
    for ((_, p), (_, q)) in state.model.params.iter().zip(before.iter()) {
        if p.role == Role::Alpha {
            assert!(p.data[0] >= ALPHA_FLOOR);
        }
        if p.role == Role::TernaryWeight {
            assert_ne!(p.data, q.data);
            // not collapsed onto a three-point set
            let mut distinct: Vec<f64> = p.data.clone();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            assert!(distinct.len() > 3, "{}", p.name);
        }
    }
}

#[test]
fn ema_tracks_masters() {
    let (mut state, data, sched) = setup(40);
    let cfg = TrainConfig { batch_size: 4, ema_decay: 0.5, ..TrainConfig::default() };
    let (x, l) = batch(&data, 41);
    let e0 = state.ema.clone();
    qat_step(&mut state, &cfg, &sched, &x, &l).unwrap();
    for (((_, e), (_, p)), (_, o)) in state.ema.iter().zip(state.model.params.iter()).zip(e0.iter()) {
        for ((ev, pv), ov) in e.data.iter().zip(&p.data).zip(&o.data) {
            assert!((ev - (ov + 0.5 * (pv - ov))).abs() < 1e-15);
        }
    }
    assert_eq!(state.ema_model().params, state.ema);
}

#[test]
fn divergence_is_reported() {
    let (mut state, data, sched) = setup(50);
    let (mut x, l) = batch(&data, 51);
    x[0].data[0] = f64::NAN;
    match qat_step(&mut state, &TrainConfig::default(), &sched, &x, &l) {
        Err(Error::Divergence { step, .. }) => assert_eq!(step, 0),
        other => panic!("{other:?}"),
    }
    assert_eq!(state.step, 0);
}

#[test]
fn training_reduces_loss_on_tiny_model() {
    let (mut state, data, sched) = setup(60);
    let cfg = TrainConfig { batch_size: 8, lr_initial: 2e-3, ..TrainConfig::default() };
    let mut first = Vec::new();
    let mut last = Vec::new();
    train_steps(&mut state, &cfg, &sched, &data, 600, |_, r| {
        if r.step < 50 {
            first.push(r.loss);
        } else if r.step >= 550 {
            last.push(r.loss);
        }
        Ok(())
    })
    .unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&last) < 0.8 * mean(&first), "{} -> {}", mean(&first), mean(&last));
}
