//! Constrained MDP data model: constraint specifications, cost kernels,
//! the discounted-limit conversion and the environment interface.

use std::fmt;

use thiserror::Error;

/// Default probability threshold for probabilistic constraints.
pub const DEFAULT_PROBABILITY_LIMIT: f64 = 0.025;

#[derive(Debug, Error, PartialEq)]
pub enum CmdpError {
    #[error("discount factor {0} is outside the open interval (0, 1)")]
    InvalidDiscount(f64),
    #[error("limit {0} is not finite")]
    NonFiniteLimit(f64),
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("action has {got} components, expected {expected}")]
    ActionDim { expected: usize, got: usize },
    #[error("non-finite action component {index}: {value}")]
    NonFiniteAction { index: usize, value: f64 },
    #[error("env {env}: {source}")]
    InPool {
        env: usize,
        #[source]
        source: Box<EnvError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConstraintKind {
    /// Bound on the probability of an undesirable event, fed by an indicator cost.
    Probabilistic,
    /// Bound on the expected value of a physical quantity.
    Average,
    /// Bound on the L1 mismatch between the policy mean and its mirrored evaluation.
    Symmetry,
}

impl ConstraintKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ConstraintKind::Probabilistic => "probabilistic",
            ConstraintKind::Average => "average",
            ConstraintKind::Symmetry => "symmetry",
        }
    }

    /// Kernel-backed constraints need a cost critic; symmetry is evaluated on the policy directly.
    pub fn has_critic(self) -> bool {
        !matches!(self, ConstraintKind::Symmetry)
    }
}

impl fmt::Display for ConstraintKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ConstraintKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "probabilistic" => Ok(ConstraintKind::Probabilistic),
            "average" => Ok(ConstraintKind::Average),
            "symmetry" => Ok(ConstraintKind::Symmetry),
            other => Err(format!("unknown constraint kind `{other}`")),
        }
    }
}

/// One constraint `E[C_k] <= D_k`. `name` selects the env cost kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSpec {
    pub id: usize,
    pub name: String,
    pub kind: ConstraintKind,
    /// Per-step limit `D_k` (not yet converted to the discounted scale).
    pub limit: f64,
    pub group_size: usize,
    pub enabled: bool,
}

impl ConstraintSpec {
    pub fn new(id: usize, name: &str, kind: ConstraintKind, limit: f64, group_size: usize) -> Self {
        Self {
            id,
            name: name.to_string(),
            kind,
            limit,
            group_size,
            enabled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmdpSpec {
    pub gamma: f64,
    pub constraints: Vec<ConstraintSpec>,
    pub env_name: String,
    pub episode_steps: usize,
    pub dt: f64,
    /// Configured episode length in seconds; must equal `episode_steps * dt`.
    pub episode_length: f64,
}

impl CmdpSpec {
    pub fn enabled(&self) -> impl Iterator<Item = &ConstraintSpec> {
        self.constraints.iter().filter(|c| c.enabled)
    }

    pub fn num_enabled(&self) -> usize {
        self.enabled().count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecViolation {
    /// Constraint name, or the CmdpSpec field at fault.
    pub subject: String,
    pub message: String,
}

impl fmt::Display for SpecViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.subject, self.message)
    }
}

/// Converts a per-step limit into the discounted-return scale, `D / (1 - gamma)`.
pub fn discounted_limit(limit: f64, gamma: f64) -> Result<f64, CmdpError> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(CmdpError::InvalidDiscount(gamma));
    }
    if !limit.is_finite() {
        return Err(CmdpError::NonFiniteLimit(limit));
    }
    Ok(limit / (1.0 - gamma))
}

/// Fraction of a group that violated its bound. Lies on the `{0, 1/n, ..., 1}` lattice.
///
/// Panics if `violated > group_size` or `group_size == 0`.
pub fn indicator_cost(violated: usize, group_size: usize) -> f64 {
    assert!(group_size >= 1, "indicator group must be nonempty");
    assert!(
        violated <= group_size,
        "violated count {violated} exceeds group size {group_size}"
    );
    violated as f64 / group_size as f64
}

/// Lists every broken invariant of `spec`; empty iff the spec is well formed.
pub fn validate_spec(spec: &CmdpSpec) -> Vec<SpecViolation> {
    let mut report = Vec::new();
    let mut push = |subject: &str, message: String| {
        report.push(SpecViolation {
            subject: subject.to_string(),
            message,
        })
    };

    if !(spec.gamma > 0.0 && spec.gamma < 1.0) {
        push(
            "gamma",
            format!("discount {} must lie strictly inside (0, 1)", spec.gamma),
        );
    }
    if spec.episode_steps == 0 {
        push("episode_steps", "must be positive".to_string());
    }
    if !(spec.dt > 0.0 && spec.dt.is_finite()) {
        push("dt", format!("step length {} must be positive", spec.dt));
    }
    let implied = spec.episode_steps as f64 * spec.dt;
    if (implied - spec.episode_length).abs() > 1e-9 * spec.episode_length.abs().max(1.0) {
        push(
            "episode_length",
            format!(
                "{} steps x {} s = {} s differs from configured {} s",
                spec.episode_steps, spec.dt, implied, spec.episode_length
            ),
        );
    }

    let mut seen = std::collections::HashSet::new();
    for c in &spec.constraints {
        if !seen.insert(c.name.as_str()) {
            push(&c.name, "duplicate constraint name".to_string());
        }
        if !c.limit.is_finite() {
            push(&c.name, format!("limit {} is not finite", c.limit));
        }
        if c.kind == ConstraintKind::Probabilistic && !(0.0..=1.0).contains(&c.limit) {
            push(
                &c.name,
                format!("probabilistic limit {} outside [0, 1]", c.limit),
            );
        }
        if c.group_size == 0 {
            push(&c.name, "group_size must be at least 1".to_string());
        }
    }

    let mut ids: Vec<usize> = spec.enabled().map(|c| c.id).collect();
    ids.sort_unstable();
    let contiguous = ids.iter().enumerate().all(|(i, &id)| i == id);
    if !contiguous {
        push(
            "constraints",
            format!("enabled constraint ids {ids:?} are not unique and contiguous from 0"),
        );
    }
    report
}

/// Renumbers the enabled constraints `0..K` in list order; disabled ones keep
/// ids past the enabled range.
pub fn renumber(constraints: &mut [ConstraintSpec]) {
    let mut next = 0;
    for c in constraints.iter_mut().filter(|c| c.enabled) {
        c.id = next;
        next += 1;
    }
    for c in constraints.iter_mut().filter(|c| !c.enabled) {
        c.id = next;
        next += 1;
    }
}

/// A signed permutation `y_i = sign_i * x_{perm_i}`. Mirror maps of the
/// environments are all of this form, which keeps them linear and cheap to
/// transpose when differentiating through them.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedPermutation {
    pub perm: Vec<usize>,
    pub sign: Vec<f64>,
}

impl SignedPermutation {
    pub fn identity(n: usize) -> Self {
        Self {
            perm: (0..n).collect(),
            sign: vec![1.0; n],
        }
    }

    /// Negates the listed coordinates, keeps the rest.
    pub fn negate(n: usize, coords: &[usize]) -> Self {
        let mut m = Self::identity(n);
        for &c in coords {
            m.sign[c] = -1.0;
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.perm
            .iter()
            .zip(&self.sign)
            .map(|(&p, &s)| s * x[p])
            .collect()
    }

    /// `out += M^T g`.
    pub fn apply_transpose_add(&self, g: &[f64], out: &mut [f64]) {
        for (i, (&p, &s)) in self.perm.iter().zip(&self.sign).enumerate() {
            out[p] += s * g[i];
        }
    }

    pub fn is_involution(&self, probe: &[f64], tol: f64) -> bool {
        let twice = self.apply(&self.apply(probe));
        twice.iter().zip(probe).all(|(a, b)| (a - b).abs() <= tol)
    }
}

/// State and action mirror maps `Psi_s`, `Psi_a`.
#[derive(Debug, Clone, PartialEq)]
pub struct MirrorSpec {
    pub state: SignedPermutation,
    pub action: SignedPermutation,
}

impl MirrorSpec {
    pub fn identity(obs_dim: usize, act_dim: usize) -> Self {
        Self {
            state: SignedPermutation::identity(obs_dim),
            action: SignedPermutation::identity(act_dim),
        }
    }

    pub fn check_involutions(&self) -> bool {
        let ps: Vec<f64> = (0..self.state.dim()).map(|i| 0.37 * i as f64 - 1.1).collect();
        let pa: Vec<f64> = (0..self.action.dim()).map(|i| 1.3 - 0.71 * i as f64).collect();
        self.state.is_involution(&ps, 1e-12) && self.action.is_involution(&pa, 1e-12)
    }
}

/// One environment transition as stored by the rollout collector.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub costs: Vec<f64>,
    pub done: bool,
    pub time_limit: bool,
    pub log_prob_old: f64,
}

/// Result of one env step. `costs` holds one entry per kernel in
/// [`Env::cost_names`], in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: Vec<f64>,
    pub reward: f64,
    pub costs: Vec<f64>,
    pub done: bool,
    pub time_limit: bool,
}

/// Static description of one cost kernel an env can emit.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelInfo {
    pub name: &'static str,
    pub kind: ConstraintKind,
    pub group_size: usize,
    pub default_limit: f64,
}

pub trait Env: Send {
    fn obs_dim(&self) -> usize;
    fn act_dim(&self) -> usize;
    fn episode_steps(&self) -> usize;
    fn dt(&self) -> f64;
    /// Cost kernels emitted by `step`, in output order.
    fn kernels(&self) -> &[KernelInfo];
    /// Starts a new episode; the seed fully determines the initial state.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError>;
    fn mirror(&self) -> Option<MirrorSpec>;

    fn cost_names(&self) -> Vec<&'static str> {
        self.kernels().iter().map(|k| k.name).collect()
    }
}

/// Shared action validation for env implementations.
pub(crate) fn check_action(action: &[f64], expected: usize) -> Result<(), EnvError> {
    if action.len() != expected {
        return Err(EnvError::ActionDim {
            expected,
            got: action.len(),
        });
    }
    if let Some((index, &value)) = action.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(EnvError::NonFiniteAction { index, value });
    }
    Ok(())
}
