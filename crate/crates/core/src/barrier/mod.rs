//! Log-barrier trust-region policy optimization.
//!
//! The policy update maximizes
//!
//! ```text
//! mean(ratio * A_r) + c_ent * H
//!   + sum_k log(d_k^i - (J_k + mean(ratio * A_k) / (1 - gamma))) / t
//!   + sum_s log(d_s^i - L_sym) / t
//! ```
//!
//! inside a KL trust region, where the thresholds `d^i` are widened each
//! iteration so the barrier is always defined at the current policy.

pub mod trainer;

use ndarray::{Array1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

pub use crate::cmdp::MirrorSpec;
use crate::nn::loss::{add_entropy_grad, ratios};
use crate::nn::{
    clip_grad_norm, entropy_mean, kl_mean, symmetry_value, symmetry_value_and_grad, Adam, CostCritic,
    FisherOperator, GaussianPolicy, NnError, Objective, ObjectiveError, RewardSurrogate, ValueNet,
};
use crate::rollout::{AdvantageSet, TrajectoryBatch};

#[derive(Debug, Clone, PartialEq)]
pub struct BarrierConfig {
    /// Barrier steepness; larger values concentrate the penalty near the limit.
    pub t: f64,
    /// Threshold enlargement factor for violated constraints.
    pub alpha: f64,
    /// Maximum mean KL per policy update.
    pub delta: f64,
    pub cg_iters: usize,
    pub damping: f64,
    pub backtrack_coeff: f64,
    pub max_backtracks: usize,
    pub entropy_coef: f64,
    pub value_epochs: usize,
    pub value_lr: f64,
    pub minibatch_size: usize,
    pub grad_clip: f64,
    /// Smallest barrier margin enforced at the current policy.
    pub epsilon_min: f64,
}

impl Default for BarrierConfig {
    fn default() -> Self {
        Self {
            t: 100.0,
            alpha: 0.02,
            delta: 0.01,
            cg_iters: 10,
            damping: 0.01,
            backtrack_coeff: 0.8,
            max_backtracks: 10,
            entropy_coef: 0.05,
            value_epochs: 20,
            value_lr: 3e-4,
            minibatch_size: 256,
            grad_clip: 1.0,
            epsilon_min: 1e-4,
        }
    }
}

impl BarrierConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let positive = [
            ("t", self.t),
            ("alpha", self.alpha),
            ("delta", self.delta),
            ("epsilon_min", self.epsilon_min),
            ("value_lr", self.value_lr),
            ("grad_clip", self.grad_clip),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(format!("barrier.{name} must be positive, got {v}"));
            }
        }
        if !(self.backtrack_coeff > 0.0 && self.backtrack_coeff < 1.0) {
            errs.push(format!(
                "barrier.backtrack_coeff must lie in (0, 1), got {}",
                self.backtrack_coeff
            ));
        }
        if !(self.damping >= 0.0) {
            errs.push(format!("barrier.damping must be nonnegative, got {}", self.damping));
        }
        if self.minibatch_size == 0 {
            errs.push("barrier.minibatch_size must be positive".into());
        }
        errs
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum BarrierError {
    #[error("barrier argument {margin} is not positive")]
    Infeasible { margin: f64 },
}

/// Per-iteration thresholds: `max(d, J + alpha d)`, then at least `J + epsilon_min`.
pub fn adaptive_thresholds(j_c: &[f64], d: &[f64], alpha: f64, epsilon_min: f64) -> Vec<f64> {
    assert_eq!(j_c.len(), d.len(), "threshold vectors must have equal length");
    j_c.iter()
        .zip(d)
        .map(|(&j, &d)| d.max(j + alpha * d).max(j + epsilon_min))
        .collect()
}

/// `log(margin) / t`, with `margin = threshold - surrogate`.
pub fn barrier_term(threshold: f64, surrogate: f64, t: f64) -> Result<f64, BarrierError> {
    let margin = threshold - surrogate;
    if margin > 0.0 {
        Ok(margin.ln() / t)
    } else {
        Err(BarrierError::Infeasible { margin })
    }
}

/// Importance-weighted reward advantage plus entropy bonus, evaluated at `policy`.
pub fn reward_surrogate(
    batch: &TrajectoryBatch,
    adv: &AdvantageSet,
    policy: &GaussianPolicy,
    entropy_coef: f64,
) -> Result<f64, NnError> {
    RewardSurrogate {
        template: policy,
        states: batch.states.view(),
        actions: batch.actions.view(),
        log_probs_old: &batch.log_probs_old,
        advantages: &adv.adv_r,
        entropy_coef,
    }
    .at(policy)
}

/// First-order estimate of constraint `k` under `policy`:
/// `J_k + mean(ratio * A_k) / (1 - gamma)`.
pub fn cost_surrogate(
    batch: &TrajectoryBatch,
    adv: &AdvantageSet,
    policy: &GaussianPolicy,
    k: usize,
    gamma: f64,
) -> Result<f64, NnError> {
    let (_, ratio) = ratios(policy, batch.states.view(), batch.actions.view(), &batch.log_probs_old)?;
    let n = ratio.len() as f64;
    let s: f64 = ratio
        .iter()
        .zip(adv.adv_c.column(k).iter())
        .map(|(r, a)| r * a)
        .sum();
    Ok(adv.j_c[k] + s / n / (1.0 - gamma))
}

/// A kernel constraint entering the barrier: advantage column and adapted threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct CostBarrier {
    pub column: usize,
    pub threshold: f64,
}

#[derive(Debug, Clone)]
pub struct SymmetryBarrier<'a> {
    pub mirror: &'a MirrorSpec,
    pub threshold: f64,
}

/// The full barrier objective on one batch.
pub struct BarrierObjective<'a> {
    pub template: &'a GaussianPolicy,
    pub states: ArrayView2<'a, f64>,
    pub actions: ArrayView2<'a, f64>,
    pub log_probs_old: &'a [f64],
    pub adv: &'a AdvantageSet,
    pub costs: Vec<CostBarrier>,
    pub symmetry: Vec<SymmetryBarrier<'a>>,
    pub t: f64,
    pub gamma: f64,
    pub entropy_coef: f64,
}

/// Objective value with the barrier margins that produced it (costs first, then symmetry).
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierEval {
    pub value: f64,
    pub margins: Vec<f64>,
}

impl<'a> BarrierObjective<'a> {
    pub fn new(
        batch: &'a TrajectoryBatch,
        adv: &'a AdvantageSet,
        policy: &'a GaussianPolicy,
        cfg: &BarrierConfig,
        gamma: f64,
    ) -> Self {
        Self {
            template: policy,
            states: batch.states.view(),
            actions: batch.actions.view(),
            log_probs_old: &batch.log_probs_old,
            adv,
            costs: Vec::new(),
            symmetry: Vec::new(),
            t: cfg.t,
            gamma,
            entropy_coef: cfg.entropy_coef,
        }
    }

    pub fn at(&self, policy: &GaussianPolicy) -> Result<BarrierEval, ObjectiveError> {
        Ok(self.eval(policy, false)?.0)
    }

    pub fn grad_at(&self, policy: &GaussianPolicy) -> Result<(BarrierEval, Vec<f64>), ObjectiveError> {
        let (e, g) = self.eval(policy, true)?;
        Ok((e, g.expect("gradient requested")))
    }

    fn eval(&self, policy: &GaussianPolicy, with_grad: bool) -> Result<(BarrierEval, Option<Vec<f64>>), ObjectiveError> {
        let (eval, ratio) = ratios(policy, self.states, self.actions, self.log_probs_old)?;
        let n = ratio.len() as f64;
        let disc = 1.0 / (1.0 - self.gamma);

        let mut reward_sum = 0.0;
        for (r, a) in ratio.iter().zip(&self.adv.adv_r) {
            reward_sum += r * a;
        }
        let mut value = reward_sum / n + self.entropy_coef * entropy_mean(eval.std.view());

        let mut margins = Vec::with_capacity(self.costs.len() + self.symmetry.len());
        // d barrier / d surrogate = -1 / (t * margin)
        let mut slopes = Vec::with_capacity(self.costs.len());
        for (idx, c) in self.costs.iter().enumerate() {
            let s: f64 = ratio
                .iter()
                .zip(self.adv.adv_c.column(c.column).iter())
                .map(|(r, a)| r * a)
                .sum();
            let surrogate = self.adv.j_c[c.column] + s / n * disc;
            let margin = c.threshold - surrogate;
            if !(margin > 0.0) {
                return Err(ObjectiveError::Infeasible { index: idx, margin });
            }
            value += margin.ln() / self.t;
            margins.push(margin);
            slopes.push(disc / (self.t * margin));
        }

        let mut sym_grads = Vec::new();
        for (s_idx, s) in self.symmetry.iter().enumerate() {
            let (l, g) = if with_grad {
                let (l, g) = symmetry_value_and_grad(policy, self.states, s.mirror)?;
                (l, Some(g))
            } else {
                (symmetry_value(policy, self.states, s.mirror)?, None)
            };
            let margin = s.threshold - l;
            if !(margin > 0.0) {
                return Err(ObjectiveError::Infeasible {
                    index: self.costs.len() + s_idx,
                    margin,
                });
            }
            value += margin.ln() / self.t;
            margins.push(margin);
            if let Some(g) = g {
                sym_grads.push((1.0 / (self.t * margin), g));
            }
        }

        let report = BarrierEval { value, margins };
        if !with_grad {
            return Ok((report, None));
        }

        let weights: Vec<f64> = ratio
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut a = self.adv.adv_r[i];
                for (c, slope) in self.costs.iter().zip(&slopes) {
                    a -= slope * self.adv.adv_c[[i, c.column]];
                }
                r * a / n
            })
            .collect();
        let mut grad = policy.weighted_log_prob_grad(&eval, self.actions, &weights);
        add_entropy_grad(policy, &mut grad, self.entropy_coef);
        for (scale, g) in sym_grads {
            for (d, s) in grad.iter_mut().zip(g) {
                *d -= scale * s;
            }
        }
        Ok((report, Some(grad)))
    }
}

impl Objective for BarrierObjective<'_> {
    fn num_params(&self) -> usize {
        self.template.num_params()
    }

    fn value(&self, params: &[f64]) -> Result<f64, ObjectiveError> {
        Ok(self.at(&self.template.with_params(params)?)?.value)
    }

    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>), ObjectiveError> {
        let (e, g) = self.grad_at(&self.template.with_params(params)?)?;
        Ok((e.value, g))
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum CgError {
    #[error("nonpositive curvature {curvature} at iteration {iteration}")]
    Breakdown { iteration: usize, curvature: f64 },
}

/// Solves `A x = b` for symmetric positive-definite `A` given as a product.
pub fn conjugate_gradient<F>(mut apply: F, b: &[f64], iters: usize, residual_tol: f64) -> Result<Vec<f64>, CgError>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let mut x = vec![0.0; b.len()];
    let mut r = b.to_vec();
    let mut p = b.to_vec();
    let mut rr = dot(&r, &r);
    if rr <= residual_tol {
        return Ok(x);
    }
    for i in 0..iters {
        let ap = apply(&p);
        let curvature = dot(&p, &ap);
        if !(curvature > 0.0) {
            if i == 0 {
                return Err(CgError::Breakdown {
                    iteration: i,
                    curvature,
                });
            }
            break;
        }
        let step = rr / curvature;
        for j in 0..x.len() {
            x[j] += step * p[j];
            r[j] -= step * ap[j];
        }
        let next = dot(&r, &r);
        if next <= residual_tol {
            break;
        }
        let beta = next / rr;
        for j in 0..p.len() {
            p[j] = r[j] + beta * p[j];
        }
        rr = next;
    }
    Ok(x)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Outcome of one trust-region update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub accepted: bool,
    /// Index of the accepted backtracking step, or the number tried when rejected.
    pub backtracks: usize,
    pub kl: f64,
    pub objective_before: f64,
    pub objective_after: f64,
    /// Barrier margins at the returned parameters.
    pub margins: Vec<f64>,
    pub diagnostic: Option<String>,
}

/// Natural-gradient direction by conjugate gradient, scaled to the KL radius,
/// then backtracked until the objective strictly improves within the trust
/// region and every barrier argument stays positive.
///
/// `evaluate` returns the objective and barrier margins at a candidate, or an
/// error if the candidate is infeasible.
pub fn trust_region_step<F>(
    policy: &GaussianPolicy,
    states: ArrayView2<'_, f64>,
    grad: &[f64],
    before: (f64, Vec<f64>),
    mut evaluate: F,
    cfg: &BarrierConfig,
) -> Result<(GaussianPolicy, StepReport), NnError>
where
    F: FnMut(&GaussianPolicy) -> Result<(f64, Vec<f64>), ObjectiveError>,
{
    let (objective_before, margins_before) = before;
    let reject = |backtracks, diagnostic: String| StepReport {
        accepted: false,
        backtracks,
        kl: 0.0,
        objective_before,
        objective_after: objective_before,
        margins: margins_before.clone(),
        diagnostic: Some(diagnostic),
    };

    let fisher = FisherOperator::new(policy, states)?;
    let direction = match conjugate_gradient(|v| fisher.apply(v, cfg.damping), grad, cfg.cg_iters, 1e-10) {
        Ok(x) => x,
        Err(e) => return Ok((policy.clone(), reject(0, format!("conjugate gradient: {e}")))),
    };
    let curvature = dot(&direction, &fisher.apply(&direction, cfg.damping));
    if !(curvature > 0.0 && curvature.is_finite()) {
        let why = if grad.iter().all(|g| *g == 0.0) {
            "zero gradient".to_string()
        } else {
            format!("nonpositive step curvature {curvature}")
        };
        return Ok((policy.clone(), reject(0, why)));
    }
    let full_step = (2.0 * cfg.delta / curvature).sqrt();

    let old_params = policy.flatten();
    let (old_means, old_std) = policy.forward(states)?;
    let mut candidate = policy.clone();
    let mut params = vec![0.0; old_params.len()];
    let mut last_reason = String::from("no improving step");
    for j in 0..cfg.max_backtracks {
        let scale = full_step * cfg.backtrack_coeff.powi(j as i32);
        for ((p, o), d) in params.iter_mut().zip(&old_params).zip(&direction) {
            *p = o + scale * d;
        }
        candidate.unflatten(&params)?;
        let (objective, margins) = match evaluate(&candidate) {
            Ok(v) => v,
            Err(ObjectiveError::Infeasible { index, margin }) => {
                last_reason = format!("barrier {index} infeasible (margin {margin:e})");
                continue;
            }
            Err(ObjectiveError::Nn(NnError::NonFinite { layer })) => {
                last_reason = format!("non-finite activation in layer {layer}");
                continue;
            }
            Err(ObjectiveError::Nn(e)) => return Err(e),
        };
        let (means, std) = candidate.forward(states)?;
        let kl = kl_mean(&old_means, old_std.view(), &means, std.view());
        if !(kl <= cfg.delta) {
            last_reason = format!("kl {kl:e} exceeds radius");
            continue;
        }
        if !(objective > objective_before) {
            last_reason = "objective did not improve".into();
            continue;
        }
        return Ok((
            candidate,
            StepReport {
                accepted: true,
                backtracks: j,
                kl,
                objective_before,
                objective_after: objective,
                margins,
                diagnostic: None,
            },
        ));
    }
    Ok((policy.clone(), reject(cfg.max_backtracks, last_reason)))
}

/// One barrier-objective update of the policy.
pub fn policy_step(
    objective: &BarrierObjective<'_>,
    policy: &GaussianPolicy,
    cfg: &BarrierConfig,
) -> Result<(GaussianPolicy, StepReport), NnError> {
    let (before, grad) = match objective.grad_at(policy) {
        Ok(v) => v,
        Err(ObjectiveError::Nn(e)) => return Err(e),
        Err(ObjectiveError::Infeasible { index, margin }) => {
            let report = StepReport {
                accepted: false,
                backtracks: 0,
                kl: 0.0,
                objective_before: f64::NAN,
                objective_after: f64::NAN,
                margins: Vec::new(),
                diagnostic: Some(format!("infeasible at current policy: barrier {index}, margin {margin:e}")),
            };
            return Ok((policy.clone(), report));
        }
    };
    trust_region_step(
        policy,
        objective.states,
        &grad,
        (before.value, before.margins),
        |p| objective.at(p).map(|e| (e.value, e.margins)),
        cfg,
    )
}

/// Reference reward-only trust-region update: the same step machinery driven
/// by the plain reward surrogate.
pub fn reward_only_step(
    surrogate: &RewardSurrogate<'_>,
    policy: &GaussianPolicy,
    cfg: &BarrierConfig,
) -> Result<(GaussianPolicy, StepReport), NnError> {
    let (before, grad) = surrogate.grad_at(policy)?;
    trust_region_step(
        policy,
        surrogate.states,
        &grad,
        (before, Vec::new()),
        |p| Ok((surrogate.at(p)?, Vec::new())),
        cfg,
    )
}

/// Reward surrogate minus fixed-weight symmetry penalties; the penalty baseline's policy objective.
pub struct PenalizedSurrogate<'a> {
    pub reward: RewardSurrogate<'a>,
    pub symmetry: Vec<(&'a MirrorSpec, f64)>,
}

impl PenalizedSurrogate<'_> {
    pub fn at(&self, policy: &GaussianPolicy) -> Result<f64, NnError> {
        let mut v = self.reward.at(policy)?;
        for (m, w) in &self.symmetry {
            v -= w * symmetry_value(policy, self.reward.states, m)?;
        }
        Ok(v)
    }

    pub fn grad_at(&self, policy: &GaussianPolicy) -> Result<(f64, Vec<f64>), NnError> {
        let (mut v, mut g) = self.reward.grad_at(policy)?;
        for (m, w) in &self.symmetry {
            let (l, lg) = symmetry_value_and_grad(policy, self.reward.states, m)?;
            v -= w * l;
            for (d, s) in g.iter_mut().zip(lg) {
                *d -= w * s;
            }
        }
        Ok((v, g))
    }
}

pub fn penalized_step(
    objective: &PenalizedSurrogate<'_>,
    policy: &GaussianPolicy,
    cfg: &BarrierConfig,
) -> Result<(GaussianPolicy, StepReport), NnError> {
    let (before, grad) = objective.grad_at(policy)?;
    trust_region_step(
        policy,
        objective.reward.states,
        &grad,
        (before, Vec::new()),
        |p| Ok((objective.at(p)?, Vec::new())),
        cfg,
    )
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CriticLosses {
    /// Mean minibatch loss over the final epoch.
    pub value: f64,
    pub cost: f64,
}

/// Minibatch Adam regression of the value net on `ret_r` and the cost critic
/// on `ret_c`, with gradient-norm clipping. Output normalizations are refit
/// to the batch targets first; both critics see the same shuffled minibatches.
pub fn train_critics(
    batch: &TrajectoryBatch,
    adv: &AdvantageSet,
    value: &mut ValueNet,
    value_opt: &mut Adam,
    mut cost: Option<(&mut CostCritic, &mut Adam)>,
    cfg: &BarrierConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CriticLosses, NnError> {
    let n = batch.len();
    let mut order: Vec<usize> = (0..n).collect();
    value.refit(&adv.ret_r);
    if let Some((critic, _)) = cost.as_mut() {
        critic.refit(adv.ret_c.view());
    }
    let mut value_params = value.net.flatten();
    let mut cost_params = cost.as_ref().map(|(c, _)| c.flatten());
    let mut losses = CriticLosses::default();
    for epoch in 0..cfg.value_epochs {
        order.shuffle(rng);
        let last = epoch + 1 == cfg.value_epochs;
        let (mut vsum, mut csum, mut count) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.minibatch_size) {
            let states = batch.states.select(Axis(0), chunk);
            let targets: Vec<f64> = chunk.iter().map(|&i| adv.ret_r[i]).collect();
            let (loss, mut grad) = value.mse_and_grad(states.view(), &targets)?;
            clip_grad_norm(&mut grad, cfg.grad_clip);
            value_opt.step(&mut value_params, &grad);
            value.net.unflatten(&value_params)?;
            vsum += loss;
            if let (Some((critic, opt)), Some(params)) = (cost.as_mut(), cost_params.as_mut()) {
                let ctargets = adv.ret_c.select(Axis(0), chunk);
                let (closs, mut cgrad) = critic.mse_and_grad(states.view(), &ctargets)?;
                clip_grad_norm(&mut cgrad, cfg.grad_clip);
                opt.step(params, &cgrad);
                critic.unflatten(params)?;
                csum += closs;
            }
            count += 1;
        }
        if last && count > 0 {
            losses.value = vsum / count as f64;
            losses.cost = csum / count as f64;
        }
    }
    Ok(losses)
}

/// Objective-free helper: barrier margins at the current policy, `d_i - j_c`.
pub fn margins_at_origin(thresholds: &[f64], j_c: &[f64]) -> Array1<f64> {
    Array1::from_iter(thresholds.iter().zip(j_c).map(|(d, j)| d - j))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_examples() {
        let d = adaptive_thresholds(&[10.0], &[2.5], 0.02, 1e-4);
        assert!((d[0] - 10.05).abs() < 1e-12);
        assert_eq!(adaptive_thresholds(&[1.0], &[2.5], 0.02, 1e-4), vec![2.5]);
        let d = adaptive_thresholds(&[0.4], &[0.0], 0.02, 1e-3);
        assert!((d[0] - 0.401).abs() < 1e-12);
    }

    #[test]
    fn barrier_term_examples() {
        assert_eq!(barrier_term(1.0, 0.0, 100.0).unwrap(), 0.0);
        let v = barrier_term(std::f64::consts::E, 0.0, 100.0).unwrap();
        assert!((v - 0.01).abs() < 1e-15);
        assert!(barrier_term(1.0, 1.0, 100.0).is_err());
        assert!(barrier_term(1.0, 2.0, 100.0).is_err());
    }

    #[test]
    fn cg_solves_spd_system() {
        // A = [[4, 1], [1, 3]], b = [1, 2] -> x = [1/11, 7/11]
        let a = [[4.0, 1.0], [1.0, 3.0]];
        let apply = |v: &[f64]| vec![a[0][0] * v[0] + a[0][1] * v[1], a[1][0] * v[0] + a[1][1] * v[1]];
        let x = conjugate_gradient(apply, &[1.0, 2.0], 10, 1e-20).unwrap();
        assert!((x[0] - 1.0 / 11.0).abs() < 1e-12);
        assert!((x[1] - 7.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn cg_reports_negative_curvature() {
        let err = conjugate_gradient(|v: &[f64]| v.iter().map(|x| -x).collect(), &[1.0], 5, 1e-12);
        assert!(matches!(err, Err(CgError::Breakdown { iteration: 0, .. })));
    }

    #[test]
    fn config_validation() {
        assert!(BarrierConfig::default().validate().is_empty());
        let bad = BarrierConfig {
            t: 0.0,
            backtrack_coeff: 1.0,
            ..Default::default()
        };
        assert_eq!(bad.validate().len(), 2);
    }
}
