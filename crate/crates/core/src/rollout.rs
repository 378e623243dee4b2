//! On-policy collection and advantage estimation.

use std::io::{self, Write};

use ndarray::{Array2, ArrayView1, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::cmdp::{Env, EnvError};
use crate::nn::{log_prob, CostCritic, GaussianPolicy, NnError, ValueNet};

/// Standard deviations below this are treated as a constant vector by [`standardize`].
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("total steps {total} not divisible by pool size {pool}")]
    Indivisible { total: usize, pool: usize },
    #[error("empty env pool")]
    EmptyPool,
}

/// Flat transition arrays, env-major: rows `e * steps_per_env .. (e + 1) * steps_per_env`
/// belong to env `e`, in time order.
///
/// The last transition of every env segment is always marked done; if the env
/// did not end there, it is flagged as a time-limit cut and carries a bootstrap
/// value of its successor state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Vec<f64>,
    /// `N x K`, one column per selected cost kernel.
    pub costs: Array2<f64>,
    pub dones: Vec<bool>,
    pub time_limits: Vec<bool>,
    pub log_probs_old: Vec<f64>,
    pub values: Vec<f64>,
    pub cost_values: Array2<f64>,
    /// Critic value of the successor state; nonzero only where `time_limits` is set.
    pub bootstrap_values: Vec<f64>,
    pub bootstrap_cost_values: Array2<f64>,
    pub num_envs: usize,
    pub steps_per_env: usize,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn num_costs(&self) -> usize {
        self.costs.ncols()
    }

    pub fn mean_reward(&self) -> f64 {
        mean(&self.rewards)
    }

    /// Writes one transition per row as comma-separated text with a header.
    pub fn write_dump<W: Write>(&self, mut w: W) -> io::Result<()> {
        let obs = self.states.ncols();
        let act = self.actions.ncols();
        let k = self.num_costs();
        let mut header = vec!["env".to_string(), "t".to_string()];
        header.extend((0..obs).map(|i| format!("state_{i}")));
        header.extend((0..act).map(|i| format!("action_{i}")));
        header.push("reward".into());
        header.extend((0..k).map(|i| format!("cost_{i}")));
        header.extend(
            ["done", "time_limit", "log_prob_old", "value", "bootstrap_value"]
                .iter()
                .map(|s| s.to_string()),
        );
        header.extend((0..k).map(|i| format!("cost_value_{i}")));
        writeln!(w, "{}", header.join(","))?;
        for r in 0..self.len() {
            let mut row = vec![
                (r / self.steps_per_env).to_string(),
                (r % self.steps_per_env).to_string(),
            ];
            row.extend(self.states.row(r).iter().map(|v| fmt_f64(*v)));
            row.extend(self.actions.row(r).iter().map(|v| fmt_f64(*v)));
            row.push(fmt_f64(self.rewards[r]));
            row.extend(self.costs.row(r).iter().map(|v| fmt_f64(*v)));
            row.push(u8::from(self.dones[r]).to_string());
            row.push(u8::from(self.time_limits[r]).to_string());
            row.push(fmt_f64(self.log_probs_old[r]));
            row.push(fmt_f64(self.values[r]));
            row.push(fmt_f64(self.bootstrap_values[r]));
            row.extend(self.cost_values.row(r).iter().map(|v| fmt_f64(*v)));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Critics used to annotate a batch with values at collection time.
#[derive(Clone, Copy)]
pub struct Critics<'a> {
    pub value: &'a ValueNet,
    pub cost: Option<&'a CostCritic>,
}

/// Seeds for one collection pass. Env `e` draws from the ChaCha stream
/// `iteration` of seed `base_seed + e`, for both action noise and reset seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RolloutSeeds {
    pub base_seed: u64,
    pub iteration: u64,
}

impl RolloutSeeds {
    pub fn env_rng(&self, env_index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.base_seed.wrapping_add(env_index as u64));
        rng.set_stream(self.iteration);
        rng
    }
}

/// Collects `total_steps` transitions split evenly across the pool. Every env
/// starts a fresh episode at the beginning of the call.
///
/// `cost_columns` picks which kernel outputs of the env land in the batch, in order.
pub fn collect(
    policy: &GaussianPolicy,
    critics: Critics<'_>,
    envs: &mut [Box<dyn Env>],
    total_steps: usize,
    cost_columns: &[usize],
    seeds: RolloutSeeds,
) -> Result<TrajectoryBatch, RolloutError> {
    let pool = envs.len();
    if pool == 0 {
        return Err(RolloutError::EmptyPool);
    }
    if total_steps % pool != 0 {
        return Err(RolloutError::Indivisible {
            total: total_steps,
            pool,
        });
    }
    let steps = total_steps / pool;
    let obs_dim = policy.obs_dim();
    let act_dim = policy.act_dim();
    let k = cost_columns.len();

    let mut states = Array2::zeros((total_steps, obs_dim));
    let mut actions = Array2::zeros((total_steps, act_dim));
    let mut rewards = vec![0.0; total_steps];
    let mut costs = Array2::zeros((total_steps, k));
    let mut dones = vec![false; total_steps];
    let mut time_limits = vec![false; total_steps];
    let mut log_probs_old = vec![0.0; total_steps];
    // (row, successor state) for every time-limit cut
    let mut cuts: Vec<(usize, Vec<f64>)> = Vec::new();

    let mut rngs: Vec<ChaCha8Rng> = (0..pool).map(|e| seeds.env_rng(e)).collect();
    let mut current = Array2::zeros((pool, obs_dim));
    for (e, env) in envs.iter_mut().enumerate() {
        let s = env.reset(rngs[e].next_u64());
        current.row_mut(e).assign(&ArrayView1::from(&s));
    }

    let std = policy.std();
    let mut action = vec![0.0; act_dim];
    for t in 0..steps {
        let means = policy.mean_net.predict(current.view())?;
        for (e, env) in envs.iter_mut().enumerate() {
            let row = e * steps + t;
            for j in 0..act_dim {
                let eps: f64 = StandardNormal.sample(&mut rngs[e]);
                action[j] = means[[e, j]] + std[j] * eps;
            }
            let outcome = env
                .step(&action)
                .map_err(|source| EnvError::InPool {
                    env: e,
                    source: Box::new(source),
                })?;
            states.row_mut(row).assign(&current.row(e));
            actions.row_mut(row).assign(&ArrayView1::from(&action));
            rewards[row] = outcome.reward;
            for (c, &col) in cost_columns.iter().enumerate() {
                costs[[row, c]] = outcome.costs[col];
            }
            let last = t + 1 == steps;
            let done = outcome.done || last;
            let time_limit = outcome.time_limit || (last && !outcome.done);
            dones[row] = done;
            time_limits[row] = time_limit;
            if time_limit {
                cuts.push((row, outcome.state.clone()));
            }
            if done && !last {
                let s = env.reset(rngs[e].next_u64());
                current.row_mut(e).assign(&ArrayView1::from(&s));
            } else {
                current.row_mut(e).assign(&ArrayView1::from(&outcome.state));
            }
        }
    }

    // Log-probs of the stored pairs under the collecting policy.
    let means_all = policy.mean_net.predict(states.view())?;
    for (dst, v) in log_probs_old
        .iter_mut()
        .zip(log_prob(&means_all, &std, actions.view()).iter())
    {
        *dst = *v;
    }

    let values = critics.value.predict(states.view())?;
    let cost_values = match critics.cost {
        Some(c) => c.predict(states.view())?,
        None => Array2::zeros((total_steps, k)),
    };
    let mut bootstrap_values = vec![0.0; total_steps];
    let mut bootstrap_cost_values = Array2::zeros((total_steps, k));
    if !cuts.is_empty() {
        let mut next = Array2::zeros((cuts.len(), obs_dim));
        for (i, (_, s)) in cuts.iter().enumerate() {
            next.row_mut(i).assign(&ArrayView1::from(s));
        }
        let bv = critics.value.predict(next.view())?;
        let bc = match critics.cost {
            Some(c) => Some(c.predict(next.view())?),
            None => None,
        };
        for (i, (row, _)) in cuts.iter().enumerate() {
            bootstrap_values[*row] = bv[i];
            if let Some(bc) = &bc {
                bootstrap_cost_values.row_mut(*row).assign(&bc.row(i));
            }
        }
    }

    Ok(TrajectoryBatch {
        states,
        actions,
        rewards,
        costs,
        dones,
        time_limits,
        log_probs_old,
        values,
        cost_values,
        bootstrap_values,
        bootstrap_cost_values,
        num_envs: pool,
        steps_per_env: steps,
    })
}

/// Generalized advantage estimation over a flat, episode-delimited signal.
///
/// The value after a failure terminal is zero; after a time-limit terminal it
/// is `bootstrap[t]`. A final transition that is not done also bootstraps.
/// Returns `(advantages, advantages + values)`.
pub fn gae(
    signal: &[f64],
    values: &[f64],
    bootstrap: &[f64],
    gamma: f64,
    lambda: f64,
    dones: &[bool],
    time_limits: &[bool],
) -> (Vec<f64>, Vec<f64>) {
    let n = signal.len();
    assert!(
        values.len() == n && bootstrap.len() == n && dones.len() == n && time_limits.len() == n,
        "gae inputs must have equal lengths"
    );
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let ends = dones[t] || t + 1 == n;
        let next_value = if dones[t] {
            if time_limits[t] {
                bootstrap[t]
            } else {
                0.0
            }
        } else if t + 1 < n {
            values[t + 1]
        } else {
            bootstrap[t]
        };
        let delta = signal[t] + gamma * next_value - values[t];
        running = if ends {
            delta
        } else {
            delta + gamma * lambda * running
        };
        adv[t] = running;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn zero_mean(xs: &[f64]) -> Vec<f64> {
    let m = mean(xs);
    xs.iter().map(|x| x - m).collect()
}

/// Zero mean, unit population std. Falls back to [`zero_mean`] for a
/// (numerically) constant input.
pub fn standardize(xs: &[f64]) -> Vec<f64> {
    let centred = zero_mean(xs);
    let var = mean(&centred.iter().map(|x| x * x).collect::<Vec<_>>());
    let std = var.sqrt();
    if std < STD_FLOOR {
        return centred;
    }
    centred.iter().map(|x| x / std).collect()
}

/// Discounted-scale estimate `mean(costs) / (1 - gamma)`.
pub fn estimate_jc(costs: ArrayView1<'_, f64>, gamma: f64) -> f64 {
    let n = costs.len();
    if n == 0 {
        return 0.0;
    }
    costs.sum() / n as f64 / (1.0 - gamma)
}

/// Advantages and regression targets for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSet {
    /// Standardized reward advantages.
    pub adv_r: Vec<f64>,
    pub ret_r: Vec<f64>,
    /// Zero-mean cost advantages, `N x K`.
    pub adv_c: Array2<f64>,
    pub ret_c: Array2<f64>,
    pub j_c: Vec<f64>,
}

/// Runs GAE on the reward and every cost column, then normalizes: the reward
/// advantage is standardized, cost advantages are only centred so they keep
/// the units of their constraint.
///
/// `reward_penalty`, when given, replaces the reward signal with
/// `r - sum_k penalty[k] * c_k`.
pub fn compute_advantages(
    batch: &TrajectoryBatch,
    gamma: f64,
    lambda: f64,
    reward_penalty: Option<&[f64]>,
) -> AdvantageSet {
    let n = batch.len();
    let k = batch.num_costs();
    let signal: Vec<f64> = match reward_penalty {
        Some(pen) => (0..n)
            .map(|i| {
                let mut r = batch.rewards[i];
                for (c, l) in pen.iter().enumerate() {
                    r -= l * batch.costs[[i, c]];
                }
                r
            })
            .collect(),
        None => batch.rewards.clone(),
    };
    let (adv, ret_r) = gae(
        &signal,
        &batch.values,
        &batch.bootstrap_values,
        gamma,
        lambda,
        &batch.dones,
        &batch.time_limits,
    );
    let adv_r = standardize(&adv);

    let mut adv_c = Array2::zeros((n, k));
    let mut ret_c = Array2::zeros((n, k));
    let mut j_c = Vec::with_capacity(k);
    for c in 0..k {
        let col = batch.costs.column(c).to_vec();
        let (a, r) = gae(
            &col,
            &batch.cost_values.column(c).to_vec(),
            &batch.bootstrap_cost_values.column(c).to_vec(),
            gamma,
            lambda,
            &batch.dones,
            &batch.time_limits,
        );
        adv_c.column_mut(c).assign(&ArrayView1::from(&zero_mean(&a)));
        ret_c.column_mut(c).assign(&ArrayView1::from(&r));
        j_c.push(estimate_jc(batch.costs.column(c), gamma));
    }
    AdvantageSet {
        adv_r,
        ret_r,
        adv_c,
        ret_c,
        j_c,
    }
}

/// Column means of an `N x K` matrix.
pub fn column_means(m: &Array2<f64>) -> Vec<f64> {
    if m.nrows() == 0 {
        return vec![0.0; m.ncols()];
    }
    m.mean_axis(Axis(0)).map(|a| a.to_vec()).unwrap_or_default()
}
