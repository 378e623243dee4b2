use ipo_core::cmdp::{ConstraintKind, Env};
use ipo_core::envs::{EnvConfig, LineWorld, LineWorldParams, PointMass2D, PointMassParams};
use ipo_core::rollout::estimate_jc;
use ndarray::Array1;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn on_lattice(v: f64, group: usize) -> bool {
    let scaled = v * group as f64;
    (0.0..=1.0).contains(&v) && (scaled - scaled.round()).abs() < 1e-12
}

proptest! {
    #[test]
    fn probabilistic_costs_on_lattice(
        seed in any::<u64>(),
        actions in prop::collection::vec((-4.0f64..4.0, -4.0f64..4.0), 1..80),
        env_index in 0usize..3,
    ) {
        let cfg = [
            EnvConfig::from_name("point_mass_2d").unwrap(),
            EnvConfig::from_name("pendulum_1").unwrap(),
            EnvConfig::from_name("line_world").unwrap(),
        ][env_index].clone();
        let mut env = cfg.build();
        env.reset(seed);
        let kernels = env.kernels().to_vec();
        for (ax, ay) in actions.into_iter().take(env.episode_steps()) {
            let a: Vec<f64> = [ax, ay][..env.act_dim()].to_vec();
            let out = env.step(&a).unwrap();
            prop_assert_eq!(out.costs.len(), kernels.len());
            for (c, k) in out.costs.iter().zip(&kernels) {
                prop_assert!(c.is_finite() && *c >= 0.0);
                if k.kind == ConstraintKind::Probabilistic {
                    prop_assert!(on_lattice(*c, k.group_size), "{} = {c}", k.name);
                }
            }
        }
    }

    #[test]
    fn point_mass_mirror_equivariance(
        pos in (-2.5f64..2.5, -2.5f64..2.5),
        vel in (-2.0f64..2.0, -2.0f64..2.0),
        cmd in (-1.5f64..1.5, -1.5f64..1.5),
        act in (-3.0f64..3.0, -3.0f64..3.0),
    ) {
        let mut env = PointMass2D::new(PointMassParams::default());
        let mirror = env.mirror().unwrap();
        env.set_state([pos.0, pos.1], [vel.0, vel.1], [cmd.0, cmd.1]);
        let out = env.step(&[act.0, act.1]).unwrap();

        let mut twin = PointMass2D::new(PointMassParams::default());
        twin.set_state([pos.0, -pos.1], [vel.0, -vel.1], [cmd.0, -cmd.1]);
        let m = twin.step(&mirror.action.apply(&[act.0, act.1])).unwrap();

        prop_assert_eq!(mirror.state.apply(&out.state), m.state);
        prop_assert_eq!(out.reward, m.reward);
        prop_assert_eq!(out.costs, m.costs);
    }

    #[test]
    fn mirror_is_involution(s in prop::collection::vec(-5.0f64..5.0, 6), a in prop::collection::vec(-5.0f64..5.0, 2)) {
        let mirror = PointMass2D::new(PointMassParams::default()).mirror().unwrap();
        prop_assert_eq!(mirror.state.apply(&mirror.state.apply(&s)), s);
        prop_assert_eq!(mirror.action.apply(&mirror.action.apply(&a)), a);
    }

    #[test]
    fn point_mass_episode_runs_to_time_limit(seed in any::<u64>(), big in 5.0f64..50.0) {
        let mut env = PointMass2D::new(PointMassParams::default());
        env.reset(seed);
        for t in 0..80 {
            // large actions push the mass far outside every box
            let out = env.step(&[big, -big]).unwrap();
            prop_assert_eq!(out.done, t == 79);
            prop_assert_eq!(out.time_limit, t == 79);
        }
    }
}

#[test]
fn point_mass_spec_examples() {
    let mut env = PointMass2D::new(PointMassParams::default());
    env.set_state([0.0; 2], [0.0; 2], [1.0, 0.0]);
    let out = env.step(&[1.0, 0.0]).unwrap();
    assert!((out.state[2] - 0.05).abs() < 1e-15);
    assert!((out.state[0] - 0.0025).abs() < 1e-15);
    assert!((out.reward + 9.025).abs() < 1e-12);

    env.set_state([0.0; 2], [0.0; 2], [0.0; 2]);
    assert_eq!(env.step(&[2.0, 0.0]).unwrap().costs[1], 0.5);

    env.set_state([0.0; 2], [1.5, 0.0], [0.0; 2]);
    assert_eq!(env.step(&[0.0, 0.0]).unwrap().costs[2], 0.0);

    let mirror = env.mirror().unwrap();
    assert_eq!(mirror.action.apply(&[1.0, -2.0]), vec![1.0, 2.0]);
    let fixed = vec![0.3, 0.0, -0.2, 0.0, 1.0, 0.0];
    assert_eq!(mirror.state.apply(&fixed), fixed);
}

/// Stochastic open-loop policy over a small action grid.
const GRID: [f64; 3] = [-2.0, 0.0, 6.0];
const WEIGHTS: [f64; 3] = [0.25, 0.25, 0.5];

fn sample(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random();
    if u < WEIGHTS[0] {
        GRID[0]
    } else if u < WEIGHTS[0] + WEIGHTS[1] {
        GRID[1]
    } else {
        GRID[2]
    }
}

/// Exact per-step mean of each kernel, enumerating every action sequence.
fn exhaustive_means(params: &LineWorldParams) -> Vec<f64> {
    let steps = params.episode_steps;
    let mut totals = vec![0.0; 2];
    let mut idx = vec![0usize; steps];
    loop {
        let mut env = LineWorld::new(params.clone());
        env.reset(0);
        let mut p = 1.0;
        let mut sums = [0.0; 2];
        for &i in &idx {
            p *= WEIGHTS[i];
            let out = env.step(&[GRID[i]]).unwrap();
            sums[0] += out.costs[0];
            sums[1] += out.costs[1];
        }
        for (t, s) in totals.iter_mut().zip(sums) {
            *t += p * s / steps as f64;
        }
        // odometer increment
        let mut pos = 0;
        while pos < steps && idx[pos] == GRID.len() - 1 {
            idx[pos] = 0;
            pos += 1;
        }
        if pos == steps {
            break;
        }
        idx[pos] += 1;
    }
    totals
}

#[test]
fn line_world_jc_matches_exhaustive_expectation() {
    let params = LineWorldParams {
        episode_steps: 8,
        ..LineWorldParams::default()
    };
    let gamma = 0.9;
    let exact: Vec<f64> = exhaustive_means(&params).iter().map(|m| m / (1.0 - gamma)).collect();
    assert!(exact[0] > 0.05 && exact[0] < 1.0 / (1.0 - gamma) - 0.05, "oracle is degenerate: {exact:?}");

    let episodes = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut env = LineWorld::new(params.clone());
    let mut cols = [Vec::new(), Vec::new()];
    for _ in 0..episodes {
        env.reset(0);
        for _ in 0..params.episode_steps {
            let out = env.step(&[sample(&mut rng)]).unwrap();
            cols[0].push(out.costs[0]);
            cols[1].push(out.costs[1]);
        }
    }
    for (k, col) in cols.into_iter().enumerate() {
        let arr = Array1::from(col);
        let est = estimate_jc(arr.view(), gamma);
        // per-episode means are i.i.d.; bound their spread by the cost range
        let range = if k == 0 { 1.0 } else { 6.0 };
        let se = range / (1.0 - gamma) / (episodes as f64).sqrt();
        assert!((est - exact[k]).abs() < 4.0 * se, "kernel {k}: {est} vs {exact:?}");
    }
}
