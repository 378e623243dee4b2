//! Flat `section.key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. `env.name` is resolved first so
//! env-specific defaults (parameters and constraint catalog) are in place
//! before the remaining keys are applied in file order. Serializing a config
//! writes every key, so parse -> serialize -> parse is a fixed point.

use std::fmt;
use std::path::PathBuf;

use crate::barrier::trainer::{CriticDesign, Mode, NetworkConfig, TrainerConfig};
use crate::barrier::BarrierConfig;
use crate::cmdp::{renumber, validate_spec, ConstraintKind, ConstraintSpec};
use crate::envs::EnvConfig;
use crate::nn::Activation;

/// Environment variables with this prefix override config keys:
/// `IPO_BARRIER__T=10` sets `barrier.t`.
pub const ENV_PREFIX: &str = "IPO_";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub trainer: TrainerConfig,
    pub iterations: u64,
    pub output_dir: PathBuf,
    /// Write a checkpoint every this many iterations; the final one is always written.
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_env(EnvConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    /// 1-based line, or `None` for whole-config problems.
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

struct Entry {
    line: usize,
    key: String,
    value: String,
}

fn entries(text: &str, errors: &mut Vec<ConfigError>) -> Vec<Entry> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => out.push(Entry {
                line: i + 1,
                key: k.trim().to_string(),
                value: v.trim().to_string(),
            }),
            _ => errors.push(ConfigError {
                line: Some(i + 1),
                message: format!("expected `key = value`, got `{line}`"),
            }),
        }
    }
    out
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}` as a number"))
}

fn boolean(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| num(x.trim())).collect()
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn activation_str(a: Activation) -> String {
    match a {
        Activation::LeakyRelu(s) => format!("leaky_relu:{s}"),
        Activation::Tanh => "tanh".into(),
    }
}

fn parse_activation(v: &str) -> Result<Activation, String> {
    match v.split_once(':') {
        Some(("leaky_relu", slope)) => Ok(Activation::LeakyRelu(num(slope)?)),
        None if v == "leaky_relu" => Ok(Activation::LeakyRelu(crate::nn::DEFAULT_LEAKY_SLOPE)),
        None if v == "tanh" => Ok(Activation::Tanh),
        _ => Err(format!("unknown activation `{v}` (leaky_relu[:slope] or tanh)")),
    }
}

impl RunConfig {
    /// Defaults for `env`: its constraint catalog, the optimizer defaults, and
    /// a 32 x 80 batch.
    pub fn for_env(env: EnvConfig) -> Self {
        let cmdp = env.default_cmdp(0.99);
        Self {
            trainer: TrainerConfig {
                seed: 0,
                cmdp,
                env,
                barrier: BarrierConfig::default(),
                network: NetworkConfig::default(),
                gae_lambda: 0.97,
                num_envs: 32,
                steps_per_env: 80,
                mode: Mode::Constrained,
            },
            iterations: 500,
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every: 50,
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigErrors> {
        Self::parse_with_overrides(text, &[])
    }

    /// Parses `text`, then applies `(key, value)` overrides as if appended to it.
    pub fn parse_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self, ConfigErrors> {
        let mut errors = Vec::new();
        let mut all = entries(text, &mut errors);
        let base_line = text.lines().count();
        for (i, (k, v)) in overrides.iter().enumerate() {
            all.push(Entry {
                line: base_line + i + 1,
                key: k.clone(),
                value: v.clone(),
            });
        }

        let env = match all.iter().rev().find(|e| e.key == "env.name") {
            Some(e) => match EnvConfig::from_name(&e.value) {
                Ok(env) => env,
                Err(msg) => {
                    errors.push(ConfigError {
                        line: Some(e.line),
                        message: msg,
                    });
                    EnvConfig::default()
                }
            },
            None => EnvConfig::default(),
        };
        let mut cfg = RunConfig::for_env(env);
        for e in all.iter().filter(|e| e.key != "env.name") {
            if let Err(message) = cfg.set(&e.key, &e.value) {
                errors.push(ConfigError {
                    line: Some(e.line),
                    message: format!("{}: {message}", e.key),
                });
            }
        }
        cfg.sync_cmdp();
        renumber(&mut cfg.trainer.cmdp.constraints);
        if errors.is_empty() {
            errors.extend(cfg.validate().into_iter().map(|message| ConfigError { line: None, message }));
        }
        errors.sort_by_key(|e| e.line);
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigErrors(errors))
        }
    }

    /// Collects `IPO_`-prefixed variables as config overrides; `__` separates sections.
    pub fn env_overrides<I: IntoIterator<Item = (String, String)>>(vars: I) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(ENV_PREFIX)
                    .map(|rest| (rest.to_ascii_lowercase().replace("__", "."), v))
            })
            .collect();
        out.sort();
        out
    }

    fn sync_cmdp(&mut self) {
        let t = &mut self.trainer;
        t.cmdp.env_name = t.env.name().to_string();
        t.cmdp.episode_steps = t.env.episode_steps();
        t.cmdp.dt = t.env.dt();
        t.cmdp.episode_length = t.cmdp.episode_steps as f64 * t.cmdp.dt;
    }

    fn constraint_mut(&mut self, name: &str) -> &mut ConstraintSpec {
        let list = &mut self.trainer.cmdp.constraints;
        if let Some(i) = list.iter().position(|c| c.name == name) {
            return &mut list[i];
        }
        let id = list.len();
        list.push(ConstraintSpec::new(id, name, ConstraintKind::Average, f64::NAN, 1));
        list.last_mut().expect("just pushed")
    }

    /// Applies one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let t = &mut self.trainer;
        let b = &mut t.barrier;
        let n = &mut t.network;
        match key {
            "seed" => t.seed = num(v)?,
            "iterations" => self.iterations = num(v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "checkpoint_every" => self.checkpoint_every = num(v)?,
            "cmdp.gamma" => t.cmdp.gamma = num(v)?,
            "barrier.t" => b.t = num(v)?,
            "barrier.alpha" => b.alpha = num(v)?,
            "barrier.delta" => b.delta = num(v)?,
            "barrier.cg_iters" => b.cg_iters = num(v)?,
            "barrier.damping" => b.damping = num(v)?,
            "barrier.backtrack_coeff" => b.backtrack_coeff = num(v)?,
            "barrier.max_backtracks" => b.max_backtracks = num(v)?,
            "barrier.entropy_coef" => b.entropy_coef = num(v)?,
            "barrier.value_epochs" => b.value_epochs = num(v)?,
            "barrier.value_lr" => b.value_lr = num(v)?,
            "barrier.minibatch_size" => b.minibatch_size = num(v)?,
            "barrier.grad_clip" => b.grad_clip = num(v)?,
            "barrier.epsilon_min" => b.epsilon_min = num(v)?,
            "network.policy_hidden" => n.policy_hidden = list(v)?,
            "network.critic_hidden" => n.critic_hidden = list(v)?,
            "network.activation" => n.activation = parse_activation(v)?,
            "network.init_std" => n.init_std = num(v)?,
            "network.critic_design" => {
                n.critic_design = match v {
                    "multi_head" => CriticDesign::MultiHead,
                    "independent" => CriticDesign::Independent,
                    _ => return Err(format!("expected multi_head or independent, got `{v}`")),
                }
            }
            "rollout.gae_lambda" => t.gae_lambda = num(v)?,
            "rollout.num_envs" => t.num_envs = num(v)?,
            "rollout.steps_per_env" => t.steps_per_env = num(v)?,
            "mode" => {
                t.mode = match v {
                    "constrained" => Mode::Constrained,
                    "reward_only" => Mode::RewardOnly,
                    "penalty" => match &t.mode {
                        Mode::Penalty(w) => Mode::Penalty(w.clone()),
                        _ => Mode::Penalty(Vec::new()),
                    },
                    _ => return Err(format!("expected constrained, reward_only or penalty, got `{v}`")),
                }
            }
            "mode.penalty" => t.mode = Mode::Penalty(list(v)?),
            _ => {
                if let Some(param) = key.strip_prefix("env.") {
                    return t.env.set_param(param, num(v)?);
                }
                let rest = key
                    .strip_prefix("constraint.")
                    .ok_or_else(|| "unknown key".to_string())?;
                let (name, field) = rest
                    .rsplit_once('.')
                    .ok_or_else(|| "expected constraint.<name>.<field>".to_string())?;
                let c = self.constraint_mut(name);
                match field {
                    "kind" => c.kind = v.parse()?,
                    "limit" => c.limit = num(v)?,
                    "group_size" => c.group_size = num(v)?,
                    "enabled" => c.enabled = boolean(v)?,
                    _ => return Err(format!("unknown constraint field `{field}`")),
                }
            }
        }
        Ok(())
    }

    /// Whole-config checks that single keys cannot express.
    pub fn validate(&self) -> Vec<String> {
        let t = &self.trainer;
        let mut out = t.barrier.validate();
        out.extend(validate_spec(&t.cmdp).into_iter().map(|v| v.to_string()));
        if t.num_envs == 0 || t.steps_per_env == 0 {
            out.push("rollout.num_envs and rollout.steps_per_env must be positive".into());
        }
        if !(0.0..=1.0).contains(&t.gae_lambda) {
            out.push(format!("rollout.gae_lambda must lie in [0, 1], got {}", t.gae_lambda));
        }
        if t.network.policy_hidden.contains(&0) || t.network.critic_hidden.contains(&0) {
            out.push("network hidden widths must be positive".into());
        }
        if !(t.network.init_std > 0.0) {
            out.push("network.init_std must be positive".into());
        }
        if let Mode::Penalty(w) = &t.mode {
            let k = t.cmdp.num_enabled();
            if w.len() != k {
                out.push(format!("mode.penalty has {} weights but {k} constraints are enabled", w.len()));
            }
        }
        out
    }

    /// Every key in a fixed order.
    pub fn serialize(&self) -> String {
        let t = &self.trainer;
        let b = &t.barrier;
        let n = &t.network;
        let mut lines = vec![
            format!("seed = {}", t.seed),
            format!("iterations = {}", self.iterations),
            format!("output_dir = {}", self.output_dir.display()),
            format!("checkpoint_every = {}", self.checkpoint_every),
            format!("env.name = {}", t.env.name()),
        ];
        for (k, v) in t.env.params() {
            lines.push(format!("env.{k} = {v}"));
        }
        lines.push(format!("cmdp.gamma = {}", t.cmdp.gamma));
        for c in &t.cmdp.constraints {
            lines.push(format!("constraint.{}.kind = {}", c.name, c.kind));
            lines.push(format!("constraint.{}.limit = {}", c.name, c.limit));
            lines.push(format!("constraint.{}.group_size = {}", c.name, c.group_size));
            lines.push(format!("constraint.{}.enabled = {}", c.name, c.enabled));
        }
        lines.extend([
            format!("barrier.t = {}", b.t),
            format!("barrier.alpha = {}", b.alpha),
            format!("barrier.delta = {}", b.delta),
            format!("barrier.cg_iters = {}", b.cg_iters),
            format!("barrier.damping = {}", b.damping),
            format!("barrier.backtrack_coeff = {}", b.backtrack_coeff),
            format!("barrier.max_backtracks = {}", b.max_backtracks),
            format!("barrier.entropy_coef = {}", b.entropy_coef),
            format!("barrier.value_epochs = {}", b.value_epochs),
            format!("barrier.value_lr = {}", b.value_lr),
            format!("barrier.minibatch_size = {}", b.minibatch_size),
            format!("barrier.grad_clip = {}", b.grad_clip),
            format!("barrier.epsilon_min = {}", b.epsilon_min),
            format!("network.policy_hidden = {}", join(&n.policy_hidden)),
            format!("network.critic_hidden = {}", join(&n.critic_hidden)),
            format!("network.activation = {}", activation_str(n.activation)),
            format!("network.init_std = {}", n.init_std),
            format!(
                "network.critic_design = {}",
                match n.critic_design {
                    CriticDesign::MultiHead => "multi_head",
                    CriticDesign::Independent => "independent",
                }
            ),
            format!("rollout.gae_lambda = {}", t.gae_lambda),
            format!("rollout.num_envs = {}", t.num_envs),
            format!("rollout.steps_per_env = {}", t.steps_per_env),
        ]);
        match &t.mode {
            Mode::Constrained => lines.push("mode = constrained".into()),
            Mode::RewardOnly => lines.push("mode = reward_only".into()),
            Mode::Penalty(w) => {
                lines.push("mode = penalty".into());
                lines.push(format!("mode.penalty = {}", join(w)));
            }
        }
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    /// Enables exactly the first `k` kernel constraints of the env catalog and
    /// disables symmetry.
    pub fn with_first_kernels(mut self, k: usize) -> Self {
        let catalog: Vec<&str> = self.trainer.env.kernels().iter().map(|k| k.name).collect();
        for c in &mut self.trainer.cmdp.constraints {
            c.enabled = catalog.iter().position(|n| *n == c.name).is_some_and(|i| i < k);
        }
        renumber(&mut self.trainer.cmdp.constraints);
        self
    }

    /// Disables every constraint.
    pub fn without_constraints(mut self) -> Self {
        for c in &mut self.trainer.cmdp.constraints {
            c.enabled = false;
        }
        self
    }
}
