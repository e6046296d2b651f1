mod common;

use common::{fd_gradient, max_rel_error, random_quotes};
use elastic_pricing::diff::Tape;
use elastic_pricing::eval::gwm;
use elastic_pricing::hgr::AdversaryPair;
use elastic_pricing::models::{Bounds, CoefficientModel};
use elastic_pricing::optimize::{
    fair_objective, init_adversary, optigrad_objective, optigrad_terms, train_fair_optigrad, train_optigrad,
    TrainConfig, TrainHooks,
};
use elastic_pricing::Error;

fn quick_config(lambda_f: f64, lambda_s: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        lambda_f,
        lambda_s,
        n_e: 5,
        batch_size: 32,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn unit_coefficient_has_zero_margin() {
    let (q, f) = random_quotes(20, 3, 1);
    let mut m = CoefficientModel::linear(3, Bounds::default(), 0);
    // a = b = 1 pins the coefficient to 1 without going through Bounds::new
    m.bounds = Bounds { lower: 1.0, upper: 1.0 };
    let idx: Vec<usize> = (0..20).collect();
    let (terms, _) = optigrad_terms(&m, m.params(), &f, &q, &idx, 2.5);
    assert_eq!(terms.margin, 0.0);
    let conv: f64 = idx.iter().map(|&i| f.prob_from_base(q.base[i], q.premium[i])).sum::<f64>() / 20.0;
    assert!((terms.objective + 2.5 * conv).abs() < 1e-12);
}

#[test]
fn objective_without_conversion_weight_is_negative_mean_gwm() {
    let (q, f) = random_quotes(64, 4, 2);
    let m = CoefficientModel::mlp(4, &[8], Bounds::default(), 3);
    let idx: Vec<usize> = (0..64).collect();
    let (terms, _) = optigrad_terms(&m, m.params(), &f, &q, &idx, 0.0);
    let total = gwm(&q, &q.coefficients(&m), &f, Bounds::default()).unwrap();
    assert!((terms.objective * 64.0 + total).abs() < 1e-9 * total.abs().max(1.0));
}

#[test]
fn optigrad_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let (q, f) = random_quotes(8, 3, seed);
        let m = if seed % 2 == 0 {
            CoefficientModel::linear(3, Bounds::default(), seed)
        } else {
            CoefficientModel::mlp(3, &[5], Bounds::default(), seed)
        };
        let idx: Vec<usize> = (0..8).collect();
        let tape = Tape::new();
        let params = tape.vars(m.params());
        let obj = optigrad_objective(&m, &params, &f, &q, &idx, 3.0);
        let analytic = tape.backward(obj).unwrap().collect(&params);
        let numeric = fd_gradient(|p| optigrad_terms(&m, p, &f, &q, &idx, 3.0).0.objective, m.params(), 1e-6);
        let err = max_rel_error(&analytic, &numeric);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn fair_gradient_matches_finite_differences_with_frozen_adversary() {
    for seed in 0..20 {
        let (q, f) = random_quotes(8, 3, seed + 100);
        let m = CoefficientModel::mlp(3, &[4], Bounds::default(), seed);
        let pair = init_adversary(&q, &m, 6, seed).unwrap();
        let idx: Vec<usize> = (0..8).collect();
        let s = q.sensitive.clone().unwrap();
        let tape = Tape::new();
        let params = tape.vars(m.params());
        let obj = fair_objective(&m, &params, &f, &pair, &q, &idx, 1.0, 40.0).unwrap();
        let analytic = tape.backward(obj).unwrap().collect(&params);
        let value = |p: &[f64]| {
            let (terms, prices) = optigrad_terms(&m, p, &f, &q, &idx, 1.0);
            let fair = pair.objective(&pair.phi.params, &pair.psi.params, &prices, &s).unwrap().value;
            terms.objective + 40.0 * fair
        };
        let numeric = fd_gradient(value, m.params(), 1e-6);
        let err = max_rel_error(&analytic, &numeric);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn fair_trainer_without_penalty_reproduces_optigrad_bitwise() {
    let (q, f) = random_quotes(300, 4, 7);
    let (dev, _) = random_quotes(100, 4, 8);
    let m = CoefficientModel::linear(4, Bounds::default(), 5);
    let cfg = quick_config(2.0, 0.0, 11);
    let hooks = TrainHooks {
        record_trajectory: true,
        check_bounds: true,
    };
    let a = train_optigrad(&q, &dev, &f, m.clone(), &cfg, hooks).unwrap();
    let adv = init_adversary(&q, &m, 8, 11).unwrap();
    let b = train_fair_optigrad(&q, &dev, &f, m, adv, &cfg, hooks).unwrap();
    assert_eq!(a.trajectory, b.trajectory);
    assert_eq!(serde_json::to_string(&a.model).unwrap(), serde_json::to_string(&b.model).unwrap());
    assert_eq!(a.best_epoch, b.best_epoch);
}

#[test]
fn trace_terms_sum_to_objective() {
    let (q, f) = random_quotes(200, 3, 9);
    let (dev, _) = random_quotes(80, 3, 10);
    let m = CoefficientModel::linear(3, Bounds::default(), 1);
    let cfg = quick_config(4.0, 30.0, 2);
    let adv = init_adversary(&q, &m, 8, 2).unwrap();
    let out = train_fair_optigrad(&q, &dev, &f, m, adv, &cfg, TrainHooks::default()).unwrap();
    assert_eq!(out.trace.epochs.len(), cfg.n_e);
    for e in &out.trace.epochs {
        let rebuilt = -e.gwm - cfg.lambda_f * e.conversion + cfg.lambda_s * e.fairness;
        assert!((rebuilt - e.objective).abs() <= 1e-10, "epoch {}: {rebuilt} vs {}", e.epoch, e.objective);
        assert_eq!(e.hgr, e.fairness.abs());
        for v in [e.objective, e.gwm, e.conversion, e.fairness, e.seconds] {
            assert!(v.is_finite());
        }
    }
}

#[test]
fn training_is_deterministic() {
    let (q, f) = random_quotes(200, 3, 12);
    let (dev, _) = random_quotes(80, 3, 13);
    let m = CoefficientModel::mlp(3, &[6], Bounds::default(), 4);
    let cfg = quick_config(1.0, 10.0, 3);
    let run = || {
        let adv = init_adversary(&q, &m, 8, 3).unwrap();
        train_fair_optigrad(&q, &dev, &f, m.clone(), adv, &cfg, TrainHooks::default()).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.trace.without_timing(), b.trace.without_timing());
    assert_eq!(a.final_model, b.final_model);
    assert_eq!(a.adversary, b.adversary);
}

#[test]
fn a_different_seed_changes_the_schedule() {
    let (q, f) = random_quotes(200, 3, 12);
    let m = CoefficientModel::linear(3, Bounds::default(), 4);
    let a = train_optigrad(&q, &q, &f, m.clone(), &quick_config(0.0, 0.0, 1), TrainHooks::default()).unwrap();
    let b = train_optigrad(&q, &q, &f, m, &quick_config(0.0, 0.0, 2), TrainHooks::default()).unwrap();
    assert_ne!(a.final_model, b.final_model);
}

#[test]
fn players_do_not_touch_each_other() {
    let (q, f) = random_quotes(16, 3, 14);
    let m = CoefficientModel::linear(3, Bounds::default(), 0);
    let mut pair = init_adversary(&q, &m, 6, 0).unwrap();
    let before = pair.clone();
    let idx: Vec<usize> = (0..16).collect();

    // descent side: gradient w.r.t. coefficient params leaves the pair as is
    let tape = Tape::new();
    let params = tape.vars(m.params());
    let obj = fair_objective(&m, &params, &f, &pair, &q, &idx, 0.0, 100.0).unwrap();
    let g = tape.backward(obj).unwrap().collect(&params);
    assert!(g.iter().any(|v| *v != 0.0));
    assert_eq!(pair, before);

    // ascent side: works on plain prices, so the coefficient model is unchanged
    let m_before = m.clone();
    let prices = q.prices(&q.coefficients(&m));
    let mut t2 = Tape::new();
    pair.ascent_step(&mut t2, &prices, q.sensitive.as_ref().unwrap(), 0.1, 0.1).unwrap();
    assert_ne!(pair, before);
    assert_eq!(m, m_before);
}

#[test]
fn adversary_failure_aborts_with_player_and_trace() {
    let (mut q, f) = random_quotes(64, 3, 15);
    let m = CoefficientModel::linear(3, Bounds::default(), 0);
    let adv = AdversaryPair::new(6, &q.prices(&q.coefficients(&m)), q.sensitive.as_ref().unwrap(), 1, 0);
    q.sensitive.as_mut().unwrap()[5] = f64::NAN;
    let err = train_fair_optigrad(&q, &q, &f, m, adv, &quick_config(0.0, 10.0, 0), TrainHooks::default()).unwrap_err();
    match &err {
        Error::Aborted { player, trace, .. } => {
            assert_eq!(*player, "adversary");
            assert!(trace.epochs.is_empty());
        }
        other => panic!("unexpected error {other}"),
    }
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn invalid_config_is_rejected() {
    let (q, f) = random_quotes(16, 3, 16);
    let m = CoefficientModel::linear(3, Bounds::default(), 0);
    for cfg in [
        TrainConfig { alpha_c: 0.0, ..TrainConfig::default() },
        TrainConfig { lambda_f: -1.0, ..TrainConfig::default() },
        TrainConfig { a: 1.6, b: 1.2, ..TrainConfig::default() },
    ] {
        assert!(train_optigrad(&q, &q, &f, m.clone(), &cfg, TrainHooks::default()).is_err());
    }
}
