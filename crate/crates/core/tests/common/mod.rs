#![allow(dead_code)]

pub mod oracles;

use ipo_core::cmdp::Env;
use ipo_core::envs::{PointMass2D, PointMassParams};
use ipo_core::nn::{Activation, CostCritic, GaussianPolicy, Mlp, MlpSpec, Objective, ValueNet};
use ipo_core::rollout::{collect, compute_advantages, AdvantageSet, Critics, RolloutSeeds, TrajectoryBatch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const COST_COLUMNS: [usize; 4] = [0, 1, 2, 3];

/// Policy whose mean network has unit output gain, so outputs are far from zero.
pub fn policy(hidden: &[usize], activation: Activation, seed: u64) -> GaussianPolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = GaussianPolicy::new(6, 2, hidden, activation, 0.7, &mut rng);
    p.mean_net = Mlp::orthogonal(MlpSpec::new(6, hidden, 2, activation), 1.0, &mut rng);
    p.log_std[1] = 0.3_f64.ln();
    p
}

pub fn point_mass_pool(n: usize) -> Vec<Box<dyn Env>> {
    (0..n)
        .map(|_| Box::new(PointMass2D::new(PointMassParams::default())) as Box<dyn Env>)
        .collect()
}

pub struct Fixture {
    pub policy: GaussianPolicy,
    pub value: ValueNet,
    pub cost: CostCritic,
    pub batch: TrajectoryBatch,
    pub adv: AdvantageSet,
}

/// A frozen PointMass batch collected by `policy`.
pub fn fixture(policy: GaussianPolicy, envs: usize, steps: usize, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let act = policy.mean_net.spec().activation;
    let hidden: Vec<usize> = policy.mean_net.spec().layer_widths[1..policy.mean_net.spec().layer_widths.len() - 1].to_vec();
    let value = ValueNet::new(6, &hidden, act, &mut rng);
    let cost = CostCritic::multi_head(6, &hidden, COST_COLUMNS.len(), act, &mut rng);
    let mut pool = point_mass_pool(envs);
    let batch = collect(
        &policy,
        Critics {
            value: &value,
            cost: Some(&cost),
        },
        &mut pool,
        envs * steps,
        &COST_COLUMNS,
        RolloutSeeds {
            base_seed: seed,
            iteration: 0,
        },
    )
    .unwrap();
    let adv = compute_advantages(&batch, 0.99, 0.97, None);
    Fixture {
        policy,
        value,
        cost,
        batch,
        adv,
    }
}

/// Central differences of `obj` at `x`.
pub fn finite_difference<O: Objective>(obj: &O, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = obj.value(&p).unwrap();
            p[i] = x[i] - h;
            let down = obj.value(&p).unwrap();
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-300)
}
