mod common;

use common::{fixture, norm, policy, Fixture, COST_COLUMNS};
use ipo_core::barrier::{
    adaptive_thresholds, cost_surrogate, policy_step, reward_only_step, reward_surrogate, train_critics,
    BarrierConfig, BarrierObjective, CostBarrier,
};
use ipo_core::nn::{Activation, Adam, CostCritic, RewardSurrogate, ValueNet};
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GAMMA: f64 = 0.99;

fn shifted(f: &Fixture, by: f64) -> ipo_core::nn::GaussianPolicy {
    let params: Vec<f64> = f
        .policy
        .flatten()
        .iter()
        .enumerate()
        .map(|(i, p)| p + by * ((i as f64 * 0.61).sin()))
        .collect();
    f.policy.with_params(&params).unwrap()
}

fn gaussian_log_density(x: &[f64], mean: &[f64], std: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(std)
        .map(|((x, m), s)| {
            let z = (x - m) / s;
            -0.5 * z * z - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
        })
        .sum()
}

#[test]
fn cost_surrogate_matches_direct_formula() {
    let f = fixture(policy(&[6], Activation::Tanh, 21), 2, 4, 3);
    let new = shifted(&f, 0.05);
    let means = new.mean_net.predict(f.batch.states.view()).unwrap();
    let std = new.std().to_vec();
    for k in 0..COST_COLUMNS.len() {
        let n = f.batch.len();
        let mut acc = 0.0;
        for i in 0..n {
            let lp = gaussian_log_density(
                f.batch.actions.row(i).as_slice().unwrap(),
                means.row(i).as_slice().unwrap(),
                &std,
            );
            acc += (lp - f.batch.log_probs_old[i]).exp() * f.adv.adv_c[[i, k]];
        }
        let direct = f.adv.j_c[k] + acc / n as f64 / (1.0 - GAMMA);
        let got = cost_surrogate(&f.batch, &f.adv, &new, k, GAMMA).unwrap();
        assert!((got - direct).abs() <= 1e-12 * direct.abs().max(1.0), "k={k}: {got} vs {direct}");
    }
}

#[test]
fn cost_surrogate_at_old_policy_is_jc() {
    let f = fixture(policy(&[16], Activation::Tanh, 22), 4, 40, 5);
    for k in 0..COST_COLUMNS.len() {
        let s = cost_surrogate(&f.batch, &f.adv, &f.policy, k, GAMMA).unwrap();
        assert!((s - f.adv.j_c[k]).abs() <= 1e-9 * f.adv.j_c[k].abs().max(1.0));
    }
    let mut flat = f.adv.clone();
    flat.adv_c.fill(0.0);
    let new = shifted(&f, 0.1);
    for k in 0..COST_COLUMNS.len() {
        assert_eq!(cost_surrogate(&f.batch, &flat, &new, k, GAMMA).unwrap(), f.adv.j_c[k]);
    }
}

#[test]
fn reward_surrogate_examples() {
    let f = fixture(policy(&[16], Activation::Tanh, 23), 4, 30, 6);
    let ent = ipo_core::nn::entropy_mean(f.policy.std().view());
    let at_old = reward_surrogate(&f.batch, &f.adv, &f.policy, 0.05).unwrap();
    assert!((at_old - 0.05 * ent).abs() < 1e-12);

    let mut zero = f.adv.clone();
    zero.adv_r.iter_mut().for_each(|a| *a = 0.0);
    assert_eq!(reward_surrogate(&f.batch, &zero, &shifted(&f, 0.1), 0.0).unwrap(), 0.0);

    let new = shifted(&f, 0.1);
    let base = reward_surrogate(&f.batch, &f.adv, &new, 0.0).unwrap();
    let mut double = f.adv.clone();
    double.adv_r.iter_mut().for_each(|a| *a *= 2.0);
    let twice = reward_surrogate(&f.batch, &double, &new, 0.0).unwrap();
    assert!((twice - 2.0 * base).abs() < 1e-12 * base.abs().max(1.0));
}

#[test]
fn zero_constraint_barrier_equals_reward_surrogate_bitwise() {
    let f = fixture(policy(&[32, 32], Activation::LeakyRelu(0.01), 24), 8, 40, 7);
    let cfg = BarrierConfig::default();
    let barrier = BarrierObjective::new(&f.batch, &f.adv, &f.policy, &cfg, GAMMA);
    let reward = RewardSurrogate {
        template: &f.policy,
        states: f.batch.states.view(),
        actions: f.batch.actions.view(),
        log_probs_old: &f.batch.log_probs_old,
        advantages: &f.adv.adv_r,
        entropy_coef: cfg.entropy_coef,
    };
    for p in [f.policy.clone(), shifted(&f, 0.03)] {
        let (be, bg) = barrier.grad_at(&p).unwrap();
        let (rv, rg) = reward.grad_at(&p).unwrap();
        assert_eq!(be.value.to_bits(), rv.to_bits());
        assert!(be.margins.is_empty());
        assert!(bg.iter().zip(&rg).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    let (pb, rb) = policy_step(&barrier, &f.policy, &cfg).unwrap();
    let (pr, rr) = reward_only_step(&reward, &f.policy, &cfg).unwrap();
    assert_eq!(pb.flatten(), pr.flatten());
    assert_eq!(rb, rr);
    assert!(rb.accepted);
}

/// Gradient with one cost barrier at margin `m` (at the old policy) minus the reward-only gradient.
fn barrier_contribution(f: &Fixture, k: usize, m: f64, t: f64) -> Vec<f64> {
    let cfg = BarrierConfig {
        t,
        ..BarrierConfig::default()
    };
    let mut obj = BarrierObjective::new(&f.batch, &f.adv, &f.policy, &cfg, GAMMA);
    let (_, plain) = obj.grad_at(&f.policy).unwrap();
    obj.costs.push(CostBarrier {
        column: k,
        threshold: f.adv.j_c[k] + m,
    });
    let (eval, with) = obj.grad_at(&f.policy).unwrap();
    assert!((eval.margins[0] - m).abs() < 1e-9 * m.max(1.0));
    with.iter().zip(&plain).map(|(a, b)| a - b).collect()
}

#[test]
fn barrier_gradient_scales_inversely_with_t_and_margin() {
    let f = fixture(policy(&[16], Activation::Tanh, 25), 4, 40, 8);
    for k in [0, 2, 3] {
        let base = norm(&barrier_contribution(&f, k, 2.0, 100.0));
        assert!(base > 0.0);
        let half_margin = norm(&barrier_contribution(&f, k, 1.0, 100.0));
        let double_t = norm(&barrier_contribution(&f, k, 2.0, 200.0));
        assert!((half_margin / base - 2.0).abs() < 1e-6, "k={k}: {}", half_margin / base);
        assert!((double_t / base - 0.5).abs() < 1e-6, "k={k}: {}", double_t / base);
    }
}

#[test]
fn stationary_point_rejects_step() {
    let f = fixture(policy(&[8], Activation::Tanh, 26), 2, 20, 9);
    let mut adv = f.adv.clone();
    adv.adv_r.iter_mut().for_each(|a| *a = 0.0);
    let cfg = BarrierConfig {
        entropy_coef: 0.0,
        ..BarrierConfig::default()
    };
    let obj = BarrierObjective::new(&f.batch, &adv, &f.policy, &cfg, GAMMA);
    let (_, g) = obj.grad_at(&f.policy).unwrap();
    assert!(g.iter().all(|x| *x == 0.0));
    let (next, report) = policy_step(&obj, &f.policy, &cfg).unwrap();
    assert!(!report.accepted);
    assert!(report.diagnostic.is_some());
    assert_eq!(next.flatten(), f.policy.flatten());
}

#[test]
fn accepted_steps_respect_trust_region_and_barriers() {
    let f = fixture(policy(&[32], Activation::Tanh, 27), 8, 40, 10);
    let cfg = BarrierConfig::default();
    let d = [2.5, 2.5, 35.0, 70.0];
    let d_i = adaptive_thresholds(&f.adv.j_c, &d, cfg.alpha, cfg.epsilon_min);
    let mut obj = BarrierObjective::new(&f.batch, &f.adv, &f.policy, &cfg, GAMMA);
    for (column, threshold) in d_i.iter().enumerate() {
        obj.costs.push(CostBarrier {
            column,
            threshold: *threshold,
        });
    }
    let (next, r) = policy_step(&obj, &f.policy, &cfg).unwrap();
    assert!(r.accepted, "{:?}", r.diagnostic);
    assert!(r.kl <= cfg.delta * (1.0 + 1e-6));
    assert!(r.margins.iter().all(|m| *m > 0.0));
    assert!(r.objective_after > r.objective_before);
    let again = obj.at(&next).unwrap();
    assert_eq!(again.value, r.objective_after);
}

proptest! {
    #[test]
    fn thresholds_monotone_and_never_below_limit(
        j in 0.0f64..100.0,
        bump in 0.0f64..50.0,
        d in 0.0f64..50.0,
        alpha in 0.001f64..0.5,
        eps in 1e-6f64..1e-2,
    ) {
        let lo = adaptive_thresholds(&[j], &[d], alpha, eps)[0];
        let hi = adaptive_thresholds(&[j + bump], &[d], alpha, eps)[0];
        prop_assert!(hi >= lo);
        prop_assert!(lo >= d);
        prop_assert!(lo - j >= eps);
        if j > d {
            prop_assert!(lo - j >= (alpha * d).max(eps) * (1.0 - 1e-12));
        }
    }
}

fn critic_batch() -> Fixture {
    fixture(policy(&[8], Activation::Tanh, 28), 2, 50, 11)
}

#[test]
fn critics_memorize_constant_targets() {
    let f = critic_batch();
    assert_eq!(f.batch.len(), 100);
    let mut adv = f.adv.clone();
    adv.ret_r.iter_mut().for_each(|y| *y = 3.0);
    for (k, mut col) in adv.ret_c.axis_iter_mut(Axis(1)).enumerate() {
        col.fill(k as f64 - 1.5);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut value = ValueNet::new(6, &[32, 32], Activation::Tanh, &mut rng);
    let mut cost = CostCritic::multi_head(6, &[32, 32], 4, Activation::Tanh, &mut rng);
    let cfg = BarrierConfig {
        value_lr: 1e-3,
        minibatch_size: 25,
        ..BarrierConfig::default()
    };
    let mut vopt = Adam::new(value.num_params(), cfg.value_lr);
    let mut copt = Adam::new(cost.num_params(), cfg.value_lr);
    for _ in 0..10 {
        train_critics(&f.batch, &adv, &mut value, &mut vopt, Some((&mut cost, &mut copt)), &cfg, &mut rng).unwrap();
    }
    let states = f.batch.states.view();
    let v = value.predict(states).unwrap();
    let vmse = v.iter().map(|p| (p - 3.0).powi(2)).sum::<f64>() / 100.0;
    let c = cost.predict(states).unwrap();
    let cmse = (&c - &adv.ret_c).mapv(|r| r * r).mean().unwrap();
    assert!(vmse < 1e-3, "value mse {vmse}");
    assert!(cmse < 1e-3, "cost mse {cmse}");
}

#[test]
fn critic_minimum_has_zero_gradient() {
    let f = critic_batch();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut value = ValueNet::new(6, &[16], Activation::Tanh, &mut rng);
    let mut adv = f.adv.clone();
    adv.ret_r = value.predict(f.batch.states.view()).unwrap();
    value.refit(&adv.ret_r);
    let (loss, grad) = value.mse_and_grad(f.batch.states.view(), &adv.ret_r).unwrap();
    assert!(loss < 1e-24);
    assert!(grad.iter().all(|g| g.abs() < 1e-12));

    let mut params = value.net.flatten();
    let before = params.clone();
    let mut opt = Adam::new(params.len(), 3e-4);
    for _ in 0..20 {
        opt.step(&mut params, &vec![0.0; before.len()]);
    }
    assert_eq!(params, before);

    let mut opt = Adam::new(value.num_params(), 3e-4);
    let losses = train_critics(&f.batch, &adv, &mut value, &mut opt, None, &BarrierConfig::default(), &mut rng).unwrap();
    assert!(losses.value < 1e-4, "loss {}", losses.value);
}

#[test]
fn head_gradients_are_separated() {
    let f = critic_batch();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut critic = CostCritic::multi_head(6, &[16, 16], 4, Activation::Tanh, &mut rng);
    let states = f.batch.states.view();
    let preds = critic.predict(states).unwrap();
    critic.refit(preds.view());
    let k = 2;
    let net = critic.nets()[0];
    let range = net.output_layer_range();
    let fan_in = net.spec().layer_widths[net.spec().layer_widths.len() - 2];
    let head_k: Vec<usize> = (0..fan_in)
        .map(|i| range.start + i * 4 + k)
        .chain([range.start + fan_in * 4 + k])
        .collect();
    for salt in [1.0, -7.0] {
        let mut targets: Array2<f64> = preds.clone();
        for (c, mut col) in targets.axis_iter_mut(Axis(1)).enumerate() {
            if c != k {
                col.mapv_inplace(|y| y + salt * (c as f64 + 1.0));
            }
        }
        let (_, g) = critic.mse_and_grad(states, &targets).unwrap();
        for &i in &head_k {
            assert!(g[i].abs() < 1e-12, "head {k} param {i}: {}", g[i]);
        }
        assert!(g[range.start + k + 1].abs() > 1e-6);
    }
}
