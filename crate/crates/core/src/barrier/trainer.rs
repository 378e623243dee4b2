use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    adaptive_thresholds, penalized_step, policy_step, reward_only_step, train_critics, BarrierConfig,
    BarrierObjective, CostBarrier, CriticLosses, PenalizedSurrogate, StepReport, SymmetryBarrier,
};
use crate::cmdp::{discounted_limit, CmdpSpec, ConstraintKind, Env, MirrorSpec};
use crate::envs::EnvConfig;
use crate::nn::io::{decode_mlp, encode_mlp, read_f64s, write_f64s, Reader};
use crate::nn::critic::{CriticHeads, OutputScale};
use crate::nn::{symmetry_value, Activation, Adam, CostCritic, GaussianPolicy, NnError, RewardSurrogate, ValueNet};
use crate::rollout::{collect, compute_advantages, Critics, RolloutError, RolloutSeeds};

const INIT_SALT: u64 = 0x5eed_1417_0000_0001;
const SHUFFLE_SALT: u64 = 0xc0ff_ee00_5eed_0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticDesign {
    MultiHead,
    Independent,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mode {
    Constrained,
    /// Reward-only trust-region updates; constraint costs are still measured.
    RewardOnly,
    /// Fixed-weight penalties, one per enabled constraint.
    Penalty(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub policy_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub activation: Activation,
    pub init_std: f64,
    pub critic_design: CriticDesign,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            policy_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            activation: Activation::LeakyRelu(crate::nn::DEFAULT_LEAKY_SLOPE),
            init_std: 1.0,
            critic_design: CriticDesign::MultiHead,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub seed: u64,
    pub cmdp: CmdpSpec,
    pub env: EnvConfig,
    pub barrier: BarrierConfig,
    pub network: NetworkConfig,
    pub gae_lambda: f64,
    pub num_envs: usize,
    pub steps_per_env: usize,
    pub mode: Mode,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("constraint `{0}` does not match any cost kernel of the environment")]
    UnknownConstraint(String),
    #[error("constraint `{name}` is declared {declared} but the kernel is {actual}")]
    KindMismatch {
        name: String,
        declared: ConstraintKind,
        actual: ConstraintKind,
    },
    #[error("symmetry constraint enabled but the environment has no mirror")]
    MissingMirror,
    #[error("penalty mode needs {expected} weights, got {got}")]
    PenaltyLength { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Where an enabled constraint's measurement comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintSource {
    /// Cost column in the batch, and the kernel index in the env catalog.
    Kernel { column: usize, kernel: usize },
    Symmetry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSlot {
    pub name: String,
    pub source: ConstraintSource,
    /// Limit on the scale `j_c` is measured in: discounted for kernels, raw for symmetry.
    pub limit: f64,
}

/// Resolves the enabled constraints of `cmdp` against the env's kernel catalog.
pub fn resolve_constraints(cmdp: &CmdpSpec, env: &EnvConfig, has_mirror: bool) -> Result<Vec<ConstraintSlot>, TrainError> {
    let kernels = env.kernels();
    let mut slots = Vec::new();
    let mut column = 0;
    for c in cmdp.enabled() {
        if c.kind == ConstraintKind::Symmetry {
            if !has_mirror {
                return Err(TrainError::MissingMirror);
            }
            slots.push(ConstraintSlot {
                name: c.name.clone(),
                source: ConstraintSource::Symmetry,
                limit: c.limit,
            });
            continue;
        }
        let kernel = kernels
            .iter()
            .position(|k| k.name == c.name)
            .ok_or_else(|| TrainError::UnknownConstraint(c.name.clone()))?;
        if kernels[kernel].kind != c.kind {
            return Err(TrainError::KindMismatch {
                name: c.name.clone(),
                declared: c.kind,
                actual: kernels[kernel].kind,
            });
        }
        let limit = discounted_limit(c.limit, cmdp.gamma).map_err(|e| TrainError::Config(e.to_string()))?;
        slots.push(ConstraintSlot {
            name: c.name.clone(),
            source: ConstraintSource::Kernel { column, kernel },
            limit,
        });
        column += 1;
    }
    Ok(slots)
}

/// Seconds spent in each phase of an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WallTimes {
    pub collect: f64,
    pub policy_step: f64,
    pub critic: f64,
}

/// Everything observable about one training iteration. Vectors are indexed by
/// enabled constraint in spec order.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub iter: u64,
    pub mean_reward: f64,
    pub j_c: Vec<f64>,
    pub d_i: Vec<f64>,
    pub kl: f64,
    pub objective_before: f64,
    pub objective_after: f64,
    pub accepted: bool,
    pub backtracks: usize,
    pub barrier_margins: Vec<f64>,
    pub value_loss: f64,
    pub cost_loss: f64,
    pub wall_times: WallTimes,
}

impl IterationReport {
    /// Accepted steps stay inside the trust region and strictly inside every barrier.
    pub fn invariant_holds(&self, delta: f64) -> bool {
        !self.accepted
            || (self.kl <= delta * (1.0 + 1e-6)
                && self.barrier_margins.iter().all(|m| *m > 0.0)
                && self.objective_after > self.objective_before)
    }
}

pub struct Trainer {
    pub config: TrainerConfig,
    pub slots: Vec<ConstraintSlot>,
    pub policy: GaussianPolicy,
    pub value: ValueNet,
    pub value_opt: Adam,
    pub cost: Option<CostCritic>,
    pub cost_opt: Option<Adam>,
    pub iteration: u64,
    envs: Vec<Box<dyn Env>>,
    mirror: Option<MirrorSpec>,
    cost_columns: Vec<usize>,
    pub last_step: Option<StepReport>,
}

impl Trainer {
    pub fn new(config: TrainerConfig) -> Result<Self, TrainError> {
        let problems = config.barrier.validate();
        if !problems.is_empty() {
            return Err(TrainError::Config(problems.join("; ")));
        }
        if config.num_envs == 0 || config.steps_per_env == 0 {
            return Err(TrainError::Config("batch needs at least one env and one step".into()));
        }
        let envs: Vec<Box<dyn Env>> = (0..config.num_envs).map(|_| config.env.build()).collect();
        let mirror = envs[0].mirror();
        let slots = resolve_constraints(&config.cmdp, &config.env, mirror.is_some())?;
        if let Mode::Penalty(w) = &config.mode {
            if w.len() != slots.len() {
                return Err(TrainError::PenaltyLength {
                    expected: slots.len(),
                    got: w.len(),
                });
            }
        }
        let cost_columns: Vec<usize> = slots
            .iter()
            .filter_map(|s| match s.source {
                ConstraintSource::Kernel { kernel, .. } => Some(kernel),
                ConstraintSource::Symmetry => None,
            })
            .collect();

        let (obs, act) = (envs[0].obs_dim(), envs[0].act_dim());
        let net = &config.network;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ INIT_SALT);
        let policy = GaussianPolicy::new(obs, act, &net.policy_hidden, net.activation, net.init_std, &mut rng);
        let value = ValueNet::new(obs, &net.critic_hidden, net.activation, &mut rng);
        let heads = cost_columns.len();
        let cost = (config.mode == Mode::Constrained && heads > 0).then(|| match net.critic_design {
            CriticDesign::MultiHead => CostCritic::multi_head(obs, &net.critic_hidden, heads, net.activation, &mut rng),
            CriticDesign::Independent => CostCritic::independent(obs, &net.critic_hidden, heads, net.activation, &mut rng),
        });
        let lr = config.barrier.value_lr;
        Ok(Self {
            value_opt: Adam::new(value.num_params(), lr),
            cost_opt: cost.as_ref().map(|c| Adam::new(c.num_params(), lr)),
            config,
            slots,
            policy,
            value,
            cost,
            iteration: 0,
            envs,
            mirror,
            cost_columns,
            last_step: None,
        })
    }

    pub fn num_constraints(&self) -> usize {
        self.slots.len()
    }

    /// One pass of collect, advantages, thresholds, policy update, critic update.
    pub fn train_iteration(&mut self) -> Result<IterationReport, TrainError> {
        let cfg = &self.config;
        let gamma = cfg.cmdp.gamma;

        let clock = Instant::now();
        let batch = collect(
            &self.policy,
            Critics {
                value: &self.value,
                cost: self.cost.as_ref(),
            },
            &mut self.envs,
            cfg.num_envs * cfg.steps_per_env,
            &self.cost_columns,
            RolloutSeeds {
                base_seed: cfg.seed,
                iteration: self.iteration,
            },
        )?;
        let collect_secs = clock.elapsed().as_secs_f64();

        let penalty = match &cfg.mode {
            Mode::Penalty(w) => {
                let mut per_column = vec![0.0; self.cost_columns.len()];
                for (slot, weight) in self.slots.iter().zip(w) {
                    if let ConstraintSource::Kernel { column, .. } = slot.source {
                        per_column[column] = *weight;
                    }
                }
                Some(per_column)
            }
            _ => None,
        };
        let adv = compute_advantages(&batch, gamma, cfg.gae_lambda, penalty.as_deref());

        let mut j_c = Vec::with_capacity(self.slots.len());
        for slot in &self.slots {
            j_c.push(match slot.source {
                ConstraintSource::Kernel { column, .. } => adv.j_c[column],
                ConstraintSource::Symmetry => {
                    let mirror = self.mirror.as_ref().ok_or(TrainError::MissingMirror)?;
                    symmetry_value(&self.policy, batch.states.view(), mirror)?
                }
            });
        }
        let limits: Vec<f64> = self.slots.iter().map(|s| s.limit).collect();
        let d_i = match cfg.mode {
            Mode::Constrained => adaptive_thresholds(&j_c, &limits, cfg.barrier.alpha, cfg.barrier.epsilon_min),
            _ => limits.clone(),
        };

        let clock = Instant::now();
        let (policy, step) = match &cfg.mode {
            Mode::Constrained => {
                let mut objective = BarrierObjective::new(&batch, &adv, &self.policy, &cfg.barrier, gamma);
                for (slot, &threshold) in self.slots.iter().zip(&d_i) {
                    match slot.source {
                        ConstraintSource::Kernel { column, .. } => objective.costs.push(CostBarrier { column, threshold }),
                        ConstraintSource::Symmetry => objective.symmetry.push(SymmetryBarrier {
                            mirror: self.mirror.as_ref().ok_or(TrainError::MissingMirror)?,
                            threshold,
                        }),
                    }
                }
                policy_step(&objective, &self.policy, &cfg.barrier)?
            }
            Mode::RewardOnly => reward_only_step(&reward_surrogate(&batch, &adv, &self.policy, cfg), &self.policy, &cfg.barrier)?,
            Mode::Penalty(w) => {
                let mut objective = PenalizedSurrogate {
                    reward: reward_surrogate(&batch, &adv, &self.policy, cfg),
                    symmetry: Vec::new(),
                };
                for (slot, weight) in self.slots.iter().zip(w) {
                    if slot.source == ConstraintSource::Symmetry {
                        objective
                            .symmetry
                            .push((self.mirror.as_ref().ok_or(TrainError::MissingMirror)?, *weight));
                    }
                }
                penalized_step(&objective, &self.policy, &cfg.barrier)?
            }
        };
        let step_secs = clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
        shuffle.set_stream(self.iteration);
        let losses: CriticLosses = train_critics(
            &batch,
            &adv,
            &mut self.value,
            &mut self.value_opt,
            self.cost.as_mut().zip(self.cost_opt.as_mut()),
            &cfg.barrier,
            &mut shuffle,
        )?;
        let critic_secs = clock.elapsed().as_secs_f64();

        let barrier_margins = match cfg.mode {
            Mode::Constrained if !step.margins.is_empty() || self.slots.is_empty() => step.margins.clone(),
            _ => d_i.iter().zip(&j_c).map(|(d, j)| d - j).collect(),
        };
        let report = IterationReport {
            iter: self.iteration,
            mean_reward: batch.mean_reward(),
            j_c,
            d_i,
            kl: step.kl,
            objective_before: step.objective_before,
            objective_after: step.objective_after,
            accepted: step.accepted,
            backtracks: step.backtracks,
            barrier_margins,
            value_loss: losses.value,
            cost_loss: losses.cost,
            wall_times: WallTimes {
                collect: collect_secs,
                policy_step: step_secs,
                critic: critic_secs,
            },
        };
        self.policy = policy;
        self.last_step = Some(step);
        self.iteration += 1;
        Ok(report)
    }

    /// Serializes the full training state. `meta` is stored verbatim (the run config).
    pub fn checkpoint(&self, meta: &str) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&self.config.seed.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        encode_mlp(&self.policy.mean_net, &mut out);
        write_f64s(&mut out, self.policy.log_std.as_slice().expect("contiguous log_std"));
        encode_mlp(&self.value.net, &mut out);
        encode_scale(&self.value.scale, &mut out);
        encode_adam(&self.value_opt, &mut out);
        match (&self.cost, &self.cost_opt) {
            (Some(critic), Some(opt)) => {
                out.push(if critic.is_multi_head() { 1 } else { 2 });
                let nets = critic.nets();
                out.extend_from_slice(&(nets.len() as u32).to_le_bytes());
                for net in nets {
                    encode_mlp(net, &mut out);
                }
                encode_scale(&critic.scale, &mut out);
                encode_adam(opt, &mut out);
            }
            _ => out.push(0),
        }
        out
    }

    /// Rebuilds a trainer from `config` and overwrites its state with the checkpoint.
    pub fn resume(config: TrainerConfig, ckpt: &Checkpoint) -> Result<Self, TrainError> {
        if ckpt.seed != config.seed {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint seed {} differs from config seed {}",
                ckpt.seed, config.seed
            )));
        }
        let mut trainer = Trainer::new(config)?;
        if trainer.policy.num_params() != ckpt.policy.num_params() || trainer.value.num_params() != ckpt.value.num_params() {
            return Err(TrainError::Checkpoint("network shapes differ from the config".into()));
        }
        if trainer.cost.as_ref().map(CostCritic::num_params) != ckpt.cost.as_ref().map(CostCritic::num_params) {
            return Err(TrainError::Checkpoint("cost critic differs from the config".into()));
        }
        trainer.policy = ckpt.policy.clone();
        trainer.value = ckpt.value.clone();
        trainer.value_opt = ckpt.value_opt.clone();
        trainer.cost = ckpt.cost.clone();
        trainer.cost_opt = ckpt.cost_opt.clone();
        trainer.iteration = ckpt.iteration;
        Ok(trainer)
    }
}

fn reward_surrogate<'a>(
    batch: &'a crate::rollout::TrajectoryBatch,
    adv: &'a crate::rollout::AdvantageSet,
    policy: &'a GaussianPolicy,
    cfg: &TrainerConfig,
) -> RewardSurrogate<'a> {
    RewardSurrogate {
        template: policy,
        states: batch.states.view(),
        actions: batch.actions.view(),
        log_probs_old: &batch.log_probs_old,
        advantages: &adv.adv_r,
        entropy_coef: cfg.barrier.entropy_coef,
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"IPOCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

fn encode_adam(opt: &Adam, out: &mut Vec<u8>) {
    out.extend_from_slice(&opt.lr.to_le_bytes());
    out.extend_from_slice(&opt.t.to_le_bytes());
    write_f64s(out, &opt.m);
    write_f64s(out, &opt.v);
}

fn encode_scale(scale: &OutputScale, out: &mut Vec<u8>) {
    write_f64s(out, &scale.shift);
    write_f64s(out, &scale.scale);
}

fn decode_scale(r: &mut Reader<'_>, width: usize) -> Result<OutputScale, NnError> {
    let shift = read_f64s(r)?;
    let scale = read_f64s(r)?;
    if shift.len() != width || scale.len() != width {
        return Err(NnError::Checkpoint("output normalization width mismatch".into()));
    }
    Ok(OutputScale { shift, scale })
}

fn decode_adam(r: &mut Reader<'_>) -> Result<Adam, NnError> {
    let lr = r.f64()?;
    let t = r.u64()?;
    let m = read_f64s(r)?;
    let v = read_f64s(r)?;
    if m.len() != v.len() {
        return Err(NnError::Checkpoint("adam moment lengths differ".into()));
    }
    let mut opt = Adam::new(m.len(), lr);
    opt.t = t;
    opt.m = m;
    opt.v = v;
    Ok(opt)
}

/// Decoded training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub seed: u64,
    pub iteration: u64,
    pub policy: GaussianPolicy,
    pub value: ValueNet,
    pub value_opt: Adam,
    pub cost: Option<CostCritic>,
    pub cost_opt: Option<Adam>,
}

impl Checkpoint {
    pub fn decode(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(NnError::Checkpoint("not a trainer checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| NnError::Checkpoint("config text is not utf-8".into()))?;
        let seed = r.u64()?;
        let iteration = r.u64()?;
        let mean_net = decode_mlp(&mut r)?;
        let log_std = read_f64s(&mut r)?;
        if log_std.len() != mean_net.output_dim() {
            return Err(NnError::Checkpoint("log_std length differs from action width".into()));
        }
        let policy = GaussianPolicy {
            mean_net,
            log_std: log_std.into(),
        };
        let net = decode_mlp(&mut r)?;
        let scale = decode_scale(&mut r, 1)?;
        let value = ValueNet { net, scale };
        let value_opt = decode_adam(&mut r)?;
        let (cost, cost_opt) = match r.u8()? {
            0 => (None, None),
            tag @ (1 | 2) => {
                let count = r.u32()? as usize;
                let nets = (0..count).map(|_| decode_mlp(&mut r)).collect::<Result<Vec<_>, _>>()?;
                let (heads, width) = if tag == 1 {
                    let mut nets = nets;
                    if nets.len() != 1 {
                        return Err(NnError::Checkpoint("multi-head critic must be one network".into()));
                    }
                    let width = nets[0].output_dim();
                    (CriticHeads::MultiHead(nets.remove(0)), width)
                } else {
                    let width = nets.len();
                    (CriticHeads::Independent(nets), width)
                };
                let critic = CostCritic {
                    heads,
                    scale: decode_scale(&mut r, width)?,
                };
                (Some(critic), Some(decode_adam(&mut r)?))
            }
            tag => return Err(NnError::Checkpoint(format!("unknown cost critic tag {tag}"))),
        };
        if r.remaining() != 0 {
            return Err(NnError::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            meta,
            seed,
            iteration,
            policy,
            value,
            value_opt,
            cost,
            cost_opt,
        })
    }
}
