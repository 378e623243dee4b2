//! Oracle computations shared by the unit-level suites and the acceptance run.

use ipo_core::barrier::{cost_surrogate, BarrierConfig, BarrierObjective, CostBarrier, SymmetryBarrier};
use ipo_core::cmdp::Env;
use ipo_core::envs::{PointMass2D, PointMassParams};
use ipo_core::nn::{
    fisher_vector_product, symmetry_value, CostValueMse, KlObjective, LossId, Objective, RewardSurrogate,
    SymmetryObjective, ValueMse,
};
use ipo_core::rollout::gae;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{finite_difference, rel_error, Fixture};

/// Relative error between the analytic gradient and central differences.
pub fn gradient_error<O: Objective>(obj: &O, x: &[f64], h: f64) -> f64 {
    assert!(obj.num_params() <= 2000, "oracle is specified for small networks");
    let (_, g) = obj.value_and_grad(x).unwrap();
    rel_error(&g, &finite_difference(obj, x, h))
}

/// Gradient errors of every loss on the fixture batch.
pub fn loss_gradient_errors(f: &Fixture, h: f64) -> Vec<(LossId, f64)> {
    let mirror = PointMass2D::new(PointMassParams::default()).mirror().unwrap();
    let theta = f.policy.flatten();
    // Evaluate away from theta_old so ratios differ from one.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let shifted: Vec<f64> = theta.iter().map(|p| p + 0.02 * rng.random_range(-1.0..1.0)).collect();
    let states = f.batch.states.view();

    LossId::ALL
        .into_iter()
        .map(|id| {
            let err = match id {
                LossId::RewardSurrogate => {
                    let obj = RewardSurrogate {
                        template: &f.policy,
                        states,
                        actions: f.batch.actions.view(),
                        log_probs_old: &f.batch.log_probs_old,
                        advantages: &f.adv.adv_r,
                        entropy_coef: 0.05,
                    };
                    gradient_error(&obj, &shifted, h)
                }
                LossId::BarrierObjective => {
                    let cfg = BarrierConfig {
                        t: 2.0,
                        ..BarrierConfig::default()
                    };
                    let mut obj = BarrierObjective::new(&f.batch, &f.adv, &f.policy, &cfg, 0.99);
                    let at = f.policy.with_params(&shifted).unwrap();
                    for k in 0..f.adv.j_c.len() {
                        obj.costs.push(CostBarrier {
                            column: k,
                            threshold: cost_surrogate(&f.batch, &f.adv, &at, k, 0.99).unwrap() + 10.0,
                        });
                    }
                    let sym = symmetry_value(&at, states, &mirror).unwrap();
                    obj.symmetry.push(SymmetryBarrier {
                        mirror: &mirror,
                        threshold: sym + 1.0,
                    });
                    gradient_error(&obj, &shifted, h)
                }
                LossId::Kl => {
                    let (old_means, old_std) = f.policy.forward(states).unwrap();
                    let obj = KlObjective {
                        template: &f.policy,
                        states,
                        old_means: &old_means,
                        old_std: &old_std,
                    };
                    gradient_error(&obj, &shifted, h)
                }
                LossId::ValueMse => {
                    let obj = ValueMse {
                        template: &f.value,
                        states,
                        targets: &f.adv.ret_r,
                    };
                    gradient_error(&obj, &f.value.net.flatten(), h)
                }
                LossId::CostValueMse => {
                    let obj = CostValueMse {
                        template: &f.cost,
                        states,
                        targets: &f.adv.ret_c,
                    };
                    gradient_error(&obj, &f.cost.flatten(), h)
                }
                LossId::SymmetryLoss => {
                    let obj = SymmetryObjective {
                        template: &f.policy,
                        states,
                        mirror: &mirror,
                    };
                    gradient_error(&obj, &shifted, h)
                }
            };
            (id, err)
        })
        .collect()
}

/// Relative errors of `F v` against central differences of the KL gradient along `v`.
pub fn fvp_errors(f: &Fixture, probes: usize) -> Vec<f64> {
    let states = f.batch.states.view();
    let (old_means, old_std) = f.policy.forward(states).unwrap();
    let kl = KlObjective {
        template: &f.policy,
        states,
        old_means: &old_means,
        old_std: &old_std,
    };
    let theta = f.policy.flatten();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let eps = 1e-4;
    (0..probes)
        .map(|_| {
            let v: Vec<f64> = (0..theta.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let plus: Vec<f64> = theta.iter().zip(&v).map(|(t, d)| t + eps * d).collect();
            let minus: Vec<f64> = theta.iter().zip(&v).map(|(t, d)| t - eps * d).collect();
            let gp = kl.value_and_grad(&plus).unwrap().1;
            let gm = kl.value_and_grad(&minus).unwrap().1;
            let fd: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
            let fv = fisher_vector_product(&f.policy, states, &v, 0.0).unwrap();
            rel_error(&fv, &fd)
        })
        .collect()
}

/// `|u.Fv - v.Fu| / max(|u.Fv|, |v.Fu|)` for random probe pairs.
pub fn fvp_symmetry_probes(f: &Fixture, probes: usize) -> Vec<f64> {
    let states = f.batch.states.view();
    let n = f.policy.num_params();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    (0..probes)
        .map(|_| {
            let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fu = fisher_vector_product(&f.policy, states, &u, 0.0).unwrap();
            let fv = fisher_vector_product(&f.policy, states, &v, 0.0).unwrap();
            let a: f64 = v.iter().zip(&fu).map(|(x, y)| x * y).sum();
            let b: f64 = u.iter().zip(&fv).map(|(x, y)| x * y).sum();
            (a - b).abs() / a.abs().max(b.abs())
        })
        .collect()
}

#[derive(Clone, Copy, PartialEq)]
pub enum End {
    Failure,
    TimeLimit,
    /// Segment cut by the end of the buffer with no terminal flag.
    Open,
}

pub struct Episode {
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub bootstrap: f64,
    pub end: End,
}

/// `A_t = sum_l (gamma lambda)^l delta_{t+l}` summed straight from the definition.
pub fn direct_advantages(ep: &Episode, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = ep.rewards.len();
    let delta: Vec<f64> = (0..n)
        .map(|t| {
            let next = if t + 1 < n {
                ep.values[t + 1]
            } else if ep.end == End::Failure {
                0.0
            } else {
                ep.bootstrap
            };
            ep.rewards[t] + gamma * next - ep.values[t]
        })
        .collect();
    (0..n)
        .map(|t| (t..n).map(|k| (gamma * lambda).powi((k - t) as i32) * delta[k]).sum())
        .collect()
}

/// Random episodes with mixed terminal types; only the last may be open.
pub fn random_episodes(rng: &mut ChaCha8Rng, count: usize) -> Vec<Episode> {
    (0..count)
        .map(|i| {
            let len = rng.random_range(1..40);
            let end = if i + 1 == count && rng.random_bool(0.5) {
                End::Open
            } else if rng.random_bool(0.5) {
                End::Failure
            } else {
                End::TimeLimit
            };
            Episode {
                rewards: (0..len).map(|_| rng.random_range(-2.0..2.0)).collect(),
                values: (0..len).map(|_| rng.random_range(-5.0..5.0)).collect(),
                bootstrap: rng.random_range(-5.0..5.0),
                end,
            }
        })
        .collect()
}

/// Largest deviation of `gae` (advantages and returns) from the direct sums
/// over episodes laid end to end in one buffer.
pub fn gae_max_deviation(episodes: &[Episode], gamma: f64, lambda: f64) -> f64 {
    let (mut r, mut v, mut b, mut d, mut tl) = (vec![], vec![], vec![], vec![], vec![]);
    for ep in episodes {
        let n = ep.rewards.len();
        r.extend(&ep.rewards);
        v.extend(&ep.values);
        for t in 0..n {
            let last = t + 1 == n;
            b.push(if last { ep.bootstrap } else { 0.0 });
            d.push(last && ep.end != End::Open);
            tl.push(last && ep.end == End::TimeLimit);
        }
    }
    let (adv, ret) = gae(&r, &v, &b, gamma, lambda, &d, &tl);
    let mut at = 0;
    let mut worst: f64 = 0.0;
    for ep in episodes {
        for (k, a) in direct_advantages(ep, gamma, lambda).into_iter().enumerate() {
            worst = worst.max((adv[at + k] - a).abs());
            worst = worst.max((ret[at + k] - (a + ep.values[k])).abs());
        }
        at += ep.rewards.len();
    }
    worst
}
