//! Scalar losses over flat parameter vectors.
//!
//! Every loss implements [`Objective`], which is what the finite-difference
//! checks and the trust-region step both consume.

use ndarray::{Array1, Array2, ArrayView2};

use super::critic::{CostCritic, ValueNet};
use super::policy::{entropy_mean, kl_mean, log_prob, GaussianPolicy, PolicyEval};
use super::NnError;
use crate::cmdp::MirrorSpec;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error(transparent)]
    Nn(#[from] NnError),
    /// A log-barrier argument is not strictly positive.
    #[error("barrier {index} infeasible: margin {margin}")]
    Infeasible { index: usize, margin: f64 },
}

/// Names of the differentiable losses, for reporting and dispatch in tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossId {
    RewardSurrogate,
    BarrierObjective,
    Kl,
    ValueMse,
    CostValueMse,
    SymmetryLoss,
}

impl LossId {
    pub const ALL: [LossId; 6] = [
        LossId::RewardSurrogate,
        LossId::BarrierObjective,
        LossId::Kl,
        LossId::ValueMse,
        LossId::CostValueMse,
        LossId::SymmetryLoss,
    ];
}

pub trait Objective {
    fn num_params(&self) -> usize;
    fn value(&self, params: &[f64]) -> Result<f64, ObjectiveError>;
    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>), ObjectiveError>;
}

/// Per-sample probability ratios `pi_new / pi_old` with the forward pass that produced them.
pub fn ratios(
    policy: &GaussianPolicy,
    states: ArrayView2<'_, f64>,
    actions: ArrayView2<'_, f64>,
    log_probs_old: &[f64],
) -> Result<(PolicyEval, Array1<f64>), NnError> {
    let eval = policy.evaluate(states)?;
    let lp = log_prob(eval.means(), &eval.std, actions);
    let ratio = Array1::from_iter(lp.iter().zip(log_probs_old).map(|(n, o)| (n - o).exp()));
    Ok((eval, ratio))
}

/// Importance-weighted reward advantage plus an entropy bonus.
pub struct RewardSurrogate<'a> {
    pub template: &'a GaussianPolicy,
    pub states: ArrayView2<'a, f64>,
    pub actions: ArrayView2<'a, f64>,
    pub log_probs_old: &'a [f64],
    pub advantages: &'a [f64],
    pub entropy_coef: f64,
}

impl RewardSurrogate<'_> {
    pub fn at(&self, policy: &GaussianPolicy) -> Result<f64, NnError> {
        let (eval, ratio) = ratios(policy, self.states, self.actions, self.log_probs_old)?;
        let n = ratio.len() as f64;
        let s: f64 = ratio.iter().zip(self.advantages).map(|(r, a)| r * a).sum();
        Ok(s / n + self.entropy_coef * entropy_mean(eval.std.view()))
    }

    pub fn grad_at(&self, policy: &GaussianPolicy) -> Result<(f64, Vec<f64>), NnError> {
        let (eval, ratio) = ratios(policy, self.states, self.actions, self.log_probs_old)?;
        let n = ratio.len() as f64;
        let mut total = 0.0;
        let weights: Vec<f64> = ratio
            .iter()
            .zip(self.advantages)
            .map(|(r, a)| {
                total += r * a;
                r * a / n
            })
            .collect();
        let mut grad = policy.weighted_log_prob_grad(&eval, self.actions, &weights);
        add_entropy_grad(policy, &mut grad, self.entropy_coef);
        Ok((total / n + self.entropy_coef * entropy_mean(eval.std.view()), grad))
    }
}

/// `d/d log_std` of `coef * entropy` is `coef` per action dimension.
pub(crate) fn add_entropy_grad(policy: &GaussianPolicy, grad: &mut [f64], coef: f64) {
    let off = policy.mean_net.num_params();
    for g in &mut grad[off..] {
        *g += coef;
    }
}

impl Objective for RewardSurrogate<'_> {
    fn num_params(&self) -> usize {
        self.template.num_params()
    }

    fn value(&self, params: &[f64]) -> Result<f64, ObjectiveError> {
        Ok(self.at(&self.template.with_params(params)?)?)
    }

    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>), ObjectiveError> {
        Ok(self.grad_at(&self.template.with_params(params)?)?)
    }
}

/// Mean `KL(old || new)` as a function of the new policy's parameters.
pub struct KlObjective<'a> {
    pub template: &'a GaussianPolicy,
    pub states: ArrayView2<'a, f64>,
    pub old_means: &'a Array2<f64>,
    pub old_std: &'a Array1<f64>,
}

impl Objective for KlObjective<'_> {
    fn num_params(&self) -> usize {
        self.template.num_params()
    }

    fn value(&self, params: &[f64]) -> Result<f64, ObjectiveError> {
        let p = self.template.with_params(params)?;
        let (means, std) = p.forward(self.states)?;
        Ok(kl_mean(self.old_means, self.old_std.view(), &means, std.view()))
    }

    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>), ObjectiveError> {
        let p = self.template.with_params(params)?;
        let eval = p.evaluate(self.states)?;
        let means = eval.means();
        let n = means.nrows().max(1) as f64;
        let var = eval.std.mapv(|s| s * s);
        let mut grad_means = Array2::zeros(means.dim());
        let mut sq = Array1::<f64>::zeros(p.act_dim());
        for i in 0..means.nrows() {
            for j in 0..p.act_dim() {
                let d = means[[i, j]] - self.old_means[[i, j]];
                grad_means[[i, j]] = d / (var[j] * n);
                sq[j] += d * d;
            }
        }
        let grad_log_std = Array1::from_iter(
            (0..p.act_dim()).map(|j| 1.0 - (self.old_std[j].powi(2) + sq[j] / n) / var[j]),
        );
        let value = kl_mean(self.old_means, self.old_std.view(), means, eval.std.view());
        Ok((value, p.backward(&eval, &grad_means, &grad_log_std)))
    }
}

/// Mean L1 mismatch `|mu(s) - Psi_a(mu(Psi_s(s)))|_1` over the batch.
pub fn symmetry_value(
    policy: &GaussianPolicy,
    states: ArrayView2<'_, f64>,
    mirror: &MirrorSpec,
) -> Result<f64, NnError> {
    Ok(symmetry_terms(policy, states, mirror, false)?.0)
}

/// Value and gradient of [`symmetry_value`]. The mean network is differentiated
/// directly, no importance ratio involved.
pub fn symmetry_value_and_grad(
    policy: &GaussianPolicy,
    states: ArrayView2<'_, f64>,
    mirror: &MirrorSpec,
) -> Result<(f64, Vec<f64>), NnError> {
    let (v, g) = symmetry_terms(policy, states, mirror, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn symmetry_terms(
    policy: &GaussianPolicy,
    states: ArrayView2<'_, f64>,
    mirror: &MirrorSpec,
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>), NnError> {
    let n = states.nrows();
    let mut mirrored = Array2::zeros(states.dim());
    for (i, row) in states.outer_iter().enumerate() {
        let m = mirror.state.apply(row.as_slice().unwrap_or(&row.to_vec()));
        mirrored.row_mut(i).assign(&Array1::from(m));
    }
    let net = &policy.mean_net;
    let direct = net.forward(states)?;
    let reflected = net.forward(mirrored.view())?;
    let act = policy.act_dim();
    let mut total = 0.0;
    let mut g_direct = Array2::zeros((n, act));
    let mut g_reflected = Array2::zeros((n, act));
    let inv_n = 1.0 / n.max(1) as f64;
    for i in 0..n {
        let mu_r: Vec<f64> = reflected.output.row(i).to_vec();
        let back = mirror.action.apply(&mu_r);
        let mut sign = vec![0.0; act];
        for j in 0..act {
            let d = direct.output[[i, j]] - back[j];
            total += d.abs();
            sign[j] = if d > 0.0 {
                inv_n
            } else if d < 0.0 {
                -inv_n
            } else {
                0.0
            };
            g_direct[[i, j]] = sign[j];
        }
        // d/dmu_r of -Psi_a(mu_r) . sign is -Psi_a^T sign.
        let mut t = vec![0.0; act];
        mirror.action.apply_transpose_add(&sign, &mut t);
        for j in 0..act {
            g_reflected[[i, j]] = -t[j];
        }
    }
    let value = total * inv_n;
    if !with_grad {
        return Ok((value, None));
    }
    let mut grad = vec![0.0; policy.num_params()];
    let m = net.num_params();
    net.backward_into(&direct, &g_direct, &mut grad[..m]);
    net.backward_into(&reflected, &g_reflected, &mut grad[..m]);
    Ok((value, Some(grad)))
}

pub struct SymmetryObjective<'a> {
    pub template: &'a GaussianPolicy,
    pub states: ArrayView2<'a, f64>,
    pub mirror: &'a MirrorSpec,
}

impl Objective for SymmetryObjective<'_> {
    fn num_params(&self) -> usize {
        self.template.num_params()
    }

    fn value(&self, params: &[f64]) -> Result<f64, ObjectiveError> {
        Ok(symmetry_value(&self.template.with_params(params)?, self.states, self.mirror)?)
    }

    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>), ObjectiveError> {
        Ok(symmetry_value_and_grad(
            &self.template.with_params(params)?,
            self.states,
            self.mirror,
        )?)
    }
}

pub struct ValueMse<'a> {
    pub template: &'a ValueNet,
    pub states: ArrayView2<'a, f64>,
    pub targets: &'a [f64],
}

impl Objective for ValueMse<'_> {
    fn num_params(&self) -> usize {
        self.template.num_params()
    }

    fn value(&self, params: &[f64]) -> Result<f64, ObjectiveError> {
        Ok(self.value_and_grad(params)?.0)
    }

    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>), ObjectiveError> {
        let mut v = self.template.clone();
        v.net.unflatten(params)?;
        Ok(v.mse_and_grad(self.states, self.targets)?)
    }
}

pub struct CostValueMse<'a> {
    pub template: &'a CostCritic,
    pub states: ArrayView2<'a, f64>,
    pub targets: &'a Array2<f64>,
}

impl Objective for CostValueMse<'_> {
    fn num_params(&self) -> usize {
        self.template.num_params()
    }

    fn value(&self, params: &[f64]) -> Result<f64, ObjectiveError> {
        Ok(self.value_and_grad(params)?.0)
    }

    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>), ObjectiveError> {
        let mut c = self.template.clone();
        c.unflatten(params)?;
        Ok(c.mse_and_grad(self.states, self.targets)?)
    }
}
