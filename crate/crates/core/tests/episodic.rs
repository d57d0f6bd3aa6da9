//! Episode mechanics: degenerate settings against hand-written reference
//! loops, determinism and resumption.

mod common;

use common::{small_net, small_pools, sources, train_config};
use pinmem::episodic::{
    finalize_memory, meta_train_step, sample_batch, split_domains, EpisodeState, StepSettings, TrainMode, Trainer,
};
use pinmem::graph::{grad, Group, ParamValues};
use pinmem::losses::{read_loss, seg_loss, LossWeights};
use pinmem::memory;

/// Hand-written heavy-ball step over every entry named in `grads`.
fn sgd(params: &mut ParamValues, velocity: &mut ParamValues, grads: &[(String, Vec<f64>)], lr: f64, mu: f64) {
    for (name, g) in grads {
        let p = params.records.iter_mut().find(|r| &r.name == name).unwrap();
        let v = velocity.records.iter_mut().find(|r| &r.name == name).unwrap();
        for i in 0..g.len() {
            v.data[i] = mu * v.data[i] + g[i];
            p.data[i] -= lr * v.data[i];
        }
    }
}

fn max_diff(a: &ParamValues, b: &ParamValues) -> f64 {
    a.records
        .iter()
        .zip(&b.records)
        .flat_map(|(x, y)| x.data.iter().zip(&y.data).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn zero_alpha_unit_momentum_is_plain_sgd_on_the_meta_test_batch() {
    let pools = small_pools();
    let mut cfg = train_config(TrainMode::Full, 10);
    cfg.rates.alpha = Some(0.0);
    cfg.memory_momentum = 1.0;
    let trainer = Trainer::new(&small_net(), cfg.clone(), &pools, &sources()).unwrap();
    let mut state = trainer.initial_state().unwrap();
    let mem0 = state.memory.clone().unwrap();

    let mut params = state.params.clone();
    let mut velocity = state.velocity.clone();
    let net = trainer.net();
    for t in 0..10 {
        trainer.step(&mut state).unwrap();

        // reference: same draws, memory frozen at its initial value, one plain step on L_read(X_mte)
        let mut rng = trainer.iteration_rng(t);
        let split = split_domains(&sources(), false, &mut rng).unwrap();
        let _x_mtr = sample_batch(&pools, &split.meta_train, cfg.batch_per_domain, &cfg.augment, None, &mut rng).unwrap();
        let x_mte = sample_batch(&pools, &split.meta_test, cfg.batch_per_domain, &cfg.augment, None, &mut rng).unwrap();
        let theta = params.to_leaves();
        let loss = read_loss(net, &theta, &mem0.to_tensor(), &x_mte, &cfg.loss).unwrap().total;
        let groups = [Group::E, Group::U, Group::D];
        let g = grad(&loss, &theta.tensors(&groups), false).unwrap();
        let named: Vec<(String, Vec<f64>)> = theta.names(&groups).into_iter().zip(g.iter().map(|x| x.to_vec())).collect();
        sgd(&mut params, &mut velocity, &named, cfg.rates.beta, cfg.rates.sgd_momentum);

        let d = max_diff(&state.params, &params);
        assert!(d <= 1e-12, "iteration {t}: max |diff| {d:e}");
        assert_eq!(state.memory.as_ref().unwrap(), &mem0, "m = 1 keeps the memory");
    }
}

#[test]
fn aggregate_mode_is_a_minimal_sgd_loop_bitwise() {
    let pools = small_pools();
    let cfg = train_config(TrainMode::Aggregate, 10);
    let trainer = Trainer::new(&small_net(), cfg.clone(), &pools, &sources()).unwrap();
    let (state, _) = trainer.train().unwrap();

    let net = trainer.net();
    let mut params = trainer.initial_state().unwrap().params;
    let mut velocity = params.zeros_like();
    for t in 0..10 {
        let mut rng = trainer.iteration_rng(t);
        let batch = sample_batch(&pools, &sources(), cfg.batch_per_domain, &cfg.augment, None, &mut rng).unwrap();
        let theta = params.to_leaves();
        let loss = seg_loss(&net.segment_plain(&theta, &batch.image_tensor()).unwrap(), &batch.labels).unwrap();
        let g = grad(&loss, &theta.tensors(&Group::ALL), false).unwrap();
        let named: Vec<(String, Vec<f64>)> = theta.names(&Group::ALL).into_iter().zip(g.iter().map(|x| x.to_vec())).collect();
        sgd(&mut params, &mut velocity, &named, cfg.rates.beta, cfg.rates.sgd_momentum);
    }
    assert_eq!(state.params, params);
    assert!(state.memory.is_none());
}

#[test]
fn inner_step_is_theta_minus_alpha_grad() {
    let pools = small_pools();
    let trainer = Trainer::new(&small_net(), train_config(TrainMode::Full, 1), &pools, &sources()).unwrap();
    let state = trainer.initial_state().unwrap();
    let mem = state.memory.clone().unwrap();
    let net = trainer.net();
    let cfg = trainer.config();
    let batch = sample_batch(&pools, &sources()[..1], 2, &cfg.augment, None, &mut trainer.iteration_rng(0)).unwrap();

    for alpha in [0.0, 0.3] {
        let s = StepSettings { alpha, memory_momentum: 0.8, loss: LossWeights::default(), second_order: true };
        let theta = state.params.to_leaves();
        let inner = meta_train_step(net, &theta, Some(&mem), &batch, &s).unwrap();

        // reference gradient of the same objective, built separately
        let p = state.params.to_leaves();
        let read = read_loss(net, &p, &mem.to_tensor(), &batch, &s.loss).unwrap().total;
        let upd = pinmem::losses::update_loss(net, &p, &mem, &batch, 0.8, &s.loss).unwrap().total;
        let g = grad(&read.add(&upd).unwrap(), &p.tensors(&Group::ALL), false).unwrap();
        for ((e, rec), gi) in inner.lookahead.entries().iter().zip(&state.params.records).zip(&g) {
            for i in 0..rec.data.len() {
                let expect = if e.group == Group::G { rec.data[i] } else { rec.data[i] - alpha * gi.data()[i] };
                assert!((e.value.data()[i] - expect).abs() <= 1e-12, "{} alpha {alpha}: {} vs {expect} grad {}", e.name, e.value.data()[i], gi.data()[i]);
            }
            if alpha == 0.0 {
                assert_eq!(e.value.data(), &rec.data[..], "alpha = 0 leaves {} unchanged", e.name);
            }
        }
    }
}

#[test]
fn zero_beta_commits_only_the_memory_classifier() {
    let pools = small_pools();
    let mut cfg = train_config(TrainMode::Full, 3);
    cfg.rates.beta = 0.0;
    cfg.rates.alpha = Some(0.05);
    let trainer = Trainer::new(&small_net(), cfg, &pools, &sources()).unwrap();
    let init = trainer.initial_state().unwrap();
    let (state, _) = trainer.train().unwrap();
    for (a, b) in init.params.records.iter().zip(&state.params.records) {
        if a.group == Group::G {
            assert_ne!(a.data, b.data, "{} should move with alpha", a.name);
        } else {
            assert_eq!(a.data, b.data, "{} must not move with beta = 0", a.name);
        }
    }
}

#[test]
fn poly_decay_scales_both_rates() {
    let mut cfg = train_config(TrainMode::Full, 4);
    assert_eq!(cfg.rates.scale(3, 4), 1.0, "constant by default");
    cfg.rates.poly_power = 0.9;
    assert_eq!(cfg.rates.scale(0, 4), 1.0);
    assert!((cfg.rates.scale(2, 4) - 0.5f64.powf(0.9)).abs() < 1e-15);
    assert_eq!(cfg.rates.scale(4, 4), 0.0);

    // the first step runs at full rate, later ones slower
    let pools = small_pools();
    for mode in [TrainMode::Full, TrainMode::Aggregate] {
        let mut decayed = train_config(mode, 4);
        decayed.rates.poly_power = 0.9;
        let a = Trainer::new(&small_net(), decayed, &pools, &sources()).unwrap();
        let b = Trainer::new(&small_net(), train_config(mode, 4), &pools, &sources()).unwrap();
        let (mut sa, mut sb) = (a.initial_state().unwrap(), b.initial_state().unwrap());
        a.step(&mut sa).unwrap();
        b.step(&mut sb).unwrap();
        assert_eq!(sa, sb);
        a.step(&mut sa).unwrap();
        b.step(&mut sb).unwrap();
        assert_ne!(sa.params, sb.params);
    }
}

#[test]
fn zero_iterations_returns_the_initial_state() {
    let pools = small_pools();
    for mode in TrainMode::ALL {
        let trainer = Trainer::new(&small_net(), train_config(mode, 0), &pools, &sources()).unwrap();
        let (state, log) = trainer.train().unwrap();
        assert!(log.is_empty());
        assert_eq!(state, trainer.initial_state().unwrap());
        assert_eq!(state.memory.is_some(), mode.uses_memory());
    }
}

#[test]
fn training_is_deterministic_and_resumable() {
    let pools = small_pools();
    for mode in TrainMode::ALL {
        let trainer = Trainer::new(&small_net(), train_config(mode, 6), &pools, &sources()).unwrap();
        let (a, log_a) = trainer.train().unwrap();
        let (b, log_b) = trainer.train().unwrap();
        assert_eq!(a, b, "{mode}");
        let losses = |l: &[pinmem::episodic::IterationMetrics]| l.iter().map(|m| m.losses()).collect::<Vec<_>>();
        assert_eq!(losses(&log_a), losses(&log_b));

        // stop after 2, round-trip through serde, continue
        let short = Trainer::new(&small_net(), train_config(mode, 2), &pools, &sources()).unwrap();
        let (mid, _) = short.train().unwrap();
        let mut resumed: EpisodeState = serde_json::from_str(&serde_json::to_string(&mid).unwrap()).unwrap();
        let log_c = trainer.run(&mut resumed, |_, _| Ok(())).unwrap();
        assert_eq!(resumed, a, "{mode} resumed");
        assert_eq!(losses(&log_c), losses(&log_a[2..]));
    }
}

#[test]
fn different_seeds_differ() {
    let pools = small_pools();
    let mut c1 = train_config(TrainMode::Full, 2);
    let c0 = c1.clone();
    c1.seed += 1;
    let a = Trainer::new(&small_net(), c0, &pools, &sources()).unwrap().train().unwrap().0;
    let b = Trainer::new(&small_net(), c1, &pools, &sources()).unwrap().train().unwrap().0;
    assert_ne!(a.params, b.params);
}

#[test]
fn finalize_equals_a_fully_frozen_update() {
    let pools = small_pools();
    let trainer = Trainer::new(&small_net(), train_config(TrainMode::Full, 1), &pools, &sources()).unwrap();
    let state = trainer.initial_state().unwrap();
    let mem = state.memory.clone().unwrap();
    let batch = sample_batch(&pools, &sources(), 2, &trainer.config().augment, None, &mut trainer.iteration_rng(3)).unwrap();
    let fin = finalize_memory(trainer.net(), &state.params, &mem, &batch, 0.8).unwrap();
    let upd = memory::update(trainer.net(), &state.params.to_leaves(), &mem, &batch, 0.8, true, true).unwrap();
    let direct = upd.commit(&mem).unwrap();
    assert_eq!(fin, direct);
    for e in state.params.to_leaves().entries() {
        let g = grad(&upd.rows.sum_all(), &[e.value.clone()], false).unwrap();
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn metrics_columns_follow_the_mode() {
    let pools = small_pools();
    for mode in TrainMode::ALL {
        let trainer = Trainer::new(&small_net(), train_config(mode, 1), &pools, &sources()).unwrap();
        let (_, log) = trainer.train().unwrap();
        let (seg, coh, div, mte) = log[0].losses();
        assert!(seg.is_finite() && seg > 0.0);
        assert_eq!(coh.is_some(), mode.uses_memory(), "{mode}");
        assert_eq!(div.is_some(), mode.uses_memory(), "{mode}");
        assert_eq!(mte.is_some(), mode.is_episodic(), "{mode}");
        assert_eq!(log[0].csv_row().split(',').count(), 6);
    }
}

#[test]
fn invalid_setups_are_rejected() {
    let pools = small_pools();
    let one = vec!["vivid".to_string()];
    assert!(Trainer::new(&small_net(), train_config(TrainMode::Full, 1), &pools, &one).is_err());
    let mut single = train_config(TrainMode::Full, 1);
    single.single_source = true;
    assert!(Trainer::new(&small_net(), single.clone(), &pools, &one).is_ok());
    assert!(Trainer::new(&small_net(), single, &pools, &sources()).is_err());
    // aggregate pools any number of sources
    assert!(Trainer::new(&small_net(), train_config(TrainMode::Aggregate, 1), &pools, &one).is_ok());
    let mut bad = train_config(TrainMode::Full, 1);
    bad.memory_momentum = 1.5;
    assert!(Trainer::new(&small_net(), bad, &pools, &sources()).is_err());
    let missing = vec!["vivid".to_string(), "nowhere".to_string()];
    assert!(Trainer::new(&small_net(), train_config(TrainMode::Full, 1), &pools, &missing).is_err());
}

#[test]
fn single_source_trains_with_heavy_meta_test() {
    let pools = small_pools();
    let mut cfg = train_config(TrainMode::Full, 2);
    cfg.single_source = true;
    let trainer = Trainer::new(&small_net(), cfg, &pools, &["dusk".to_string()]).unwrap();
    let (state, log) = trainer.train().unwrap();
    assert_eq!(state.iteration, 2);
    assert!(log.iter().all(|m| m.l_read_mte.unwrap().is_finite()));
}

/// Every check in this file, for the acceptance runner.
#[allow(dead_code)]
pub fn suite() -> Vec<(&'static str, fn())> {
    vec![
        ("zero_alpha_unit_momentum_is_plain_sgd_on_the_meta_test_batch", zero_alpha_unit_momentum_is_plain_sgd_on_the_meta_test_batch as fn()),
        ("aggregate_mode_is_a_minimal_sgd_loop_bitwise", aggregate_mode_is_a_minimal_sgd_loop_bitwise as fn()),
        ("inner_step_is_theta_minus_alpha_grad", inner_step_is_theta_minus_alpha_grad as fn()),
        ("zero_beta_commits_only_the_memory_classifier", zero_beta_commits_only_the_memory_classifier as fn()),
        ("poly_decay_scales_both_rates", poly_decay_scales_both_rates as fn()),
        ("zero_iterations_returns_the_initial_state", zero_iterations_returns_the_initial_state as fn()),
        ("training_is_deterministic_and_resumable", training_is_deterministic_and_resumable as fn()),
        ("different_seeds_differ", different_seeds_differ as fn()),
        ("finalize_equals_a_fully_frozen_update", finalize_equals_a_fully_frozen_update as fn()),
        ("metrics_columns_follow_the_mode", metrics_columns_follow_the_mode as fn()),
        ("invalid_setups_are_rejected", invalid_setups_are_rejected as fn()),
        ("single_source_trains_with_heavy_meta_test", single_source_trains_with_heavy_meta_test as fn()),
    ]
}
