//! Small analytic constrained-control environments.
//!
//! None of them terminate on constraint violation: an episode ends only at
//! its time limit, and violations show up purely as costs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cmdp::{
    check_action, indicator_cost, renumber, CmdpSpec, ConstraintKind, ConstraintSpec, Env, EnvError, KernelInfo, MirrorSpec,
    SignedPermutation, StepOutcome, DEFAULT_PROBABILITY_LIMIT,
};

const P: ConstraintKind = ConstraintKind::Probabilistic;
const A: ConstraintKind = ConstraintKind::Average;

/// Default bound on the mean L1 mirror mismatch of the policy mean.
pub const DEFAULT_SYMMETRY_LIMIT: f64 = 0.1;

/// Tunable physical parameters of [`PointMass2D`].
#[derive(Debug, Clone, PartialEq)]
pub struct PointMassParams {
    pub k_c: f64,
    /// Weight of the optional `-coef * |a|^2` effort penalty in the reward.
    pub effort_coef: f64,
    pub box_half_width: f64,
    pub act_bound: f64,
    pub speed_limit: f64,
    pub cmd_range: f64,
    pub dt: f64,
    pub episode_steps: usize,
}

impl Default for PointMassParams {
    fn default() -> Self {
        Self {
            k_c: 10.0,
            effort_coef: 0.0,
            box_half_width: 2.0,
            act_bound: 1.5,
            speed_limit: 1.5,
            cmd_range: 1.5,
            dt: 0.05,
            episode_steps: 80,
        }
    }
}

pub const POINT_MASS_KERNELS: [KernelInfo; 10] = [
    KernelInfo { name: "position_box", kind: P, group_size: 2, default_limit: DEFAULT_PROBABILITY_LIMIT },
    KernelInfo { name: "actuation", kind: P, group_size: 2, default_limit: DEFAULT_PROBABILITY_LIMIT },
    KernelInfo { name: "speed_overshoot", kind: A, group_size: 1, default_limit: 0.35 },
    KernelInfo { name: "effort", kind: A, group_size: 1, default_limit: 0.7 },
    KernelInfo { name: "velocity_box", kind: P, group_size: 2, default_limit: DEFAULT_PROBABILITY_LIMIT },
    KernelInfo { name: "outer_box", kind: P, group_size: 2, default_limit: DEFAULT_PROBABILITY_LIMIT },
    KernelInfo { name: "lateral_effort", kind: A, group_size: 1, default_limit: 1.0 },
    KernelInfo { name: "longitudinal_effort", kind: A, group_size: 1, default_limit: 1.0 },
    KernelInfo { name: "distance", kind: A, group_size: 1, default_limit: 2.0 },
    KernelInfo { name: "saturation", kind: P, group_size: 2, default_limit: DEFAULT_PROBABILITY_LIMIT },
];

/// Planar point mass tracking a velocity command.
///
/// Observation `[p_x, p_y, v_x, v_y, cmd_x, cmd_y]`, action is an acceleration.
/// Dynamics are exactly `v' = v + a dt`, `p' = p + v' dt`; reward is
/// `-k_c |cmd - v'|^2 - effort_coef |a|^2`.
///
/// The command is drawn uniformly from `[-cmd_range, cmd_range]^2` at reset
/// and the start position is placed upstream of it, `p_0 = -cmd T / 2`
/// clamped to 95% of the box, so the nominal path is centred on the origin.
#[derive(Debug, Clone)]
pub struct PointMass2D {
    pub params: PointMassParams,
    pos: [f64; 2],
    vel: [f64; 2],
    cmd: [f64; 2],
    t: usize,
}

impl PointMass2D {
    pub fn new(params: PointMassParams) -> Self {
        Self {
            params,
            pos: [0.0; 2],
            vel: [0.0; 2],
            cmd: [0.0; 2],
            t: 0,
        }
    }

    /// Puts the env in an explicit state, bypassing `reset`.
    pub fn set_state(&mut self, pos: [f64; 2], vel: [f64; 2], cmd: [f64; 2]) {
        self.pos = pos;
        self.vel = vel;
        self.cmd = cmd;
        self.t = 0;
    }

    fn observe(&self) -> Vec<f64> {
        vec![
            self.pos[0], self.pos[1], self.vel[0], self.vel[1], self.cmd[0], self.cmd[1],
        ]
    }

    fn costs(&self, a: &[f64], pos: [f64; 2], vel: [f64; 2]) -> Vec<f64> {
        let p = &self.params;
        let count = |xs: [f64; 2], bound: f64| xs.iter().filter(|x| x.abs() > bound).count();
        let speed = (vel[0] * vel[0] + vel[1] * vel[1]).sqrt();
        let acts = [a[0], a[1]];
        vec![
            indicator_cost(count(pos, p.box_half_width), 2),
            indicator_cost(count(acts, p.act_bound), 2),
            (speed - p.speed_limit).max(0.0),
            0.5 * (a[0].abs() + a[1].abs()),
            indicator_cost(count(vel, 2.0), 2),
            indicator_cost(count(pos, 1.5 * p.box_half_width), 2),
            a[1].abs(),
            a[0].abs(),
            (pos[0] * pos[0] + pos[1] * pos[1]).sqrt(),
            indicator_cost(count(acts, 2.5), 2),
        ]
    }
}

impl Env for PointMass2D {
    fn obs_dim(&self) -> usize {
        6
    }

    fn act_dim(&self) -> usize {
        2
    }

    fn episode_steps(&self) -> usize {
        self.params.episode_steps
    }

    fn dt(&self) -> f64 {
        self.params.dt
    }

    fn kernels(&self) -> &[KernelInfo] {
        &POINT_MASS_KERNELS
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = self.params.cmd_range;
        let half = 0.5 * self.params.episode_steps as f64 * self.params.dt;
        let lim = 0.95 * self.params.box_half_width;
        for i in 0..2 {
            self.cmd[i] = rng.random_range(-r..=r);
            self.pos[i] = (-self.cmd[i] * half).clamp(-lim, lim);
            self.vel[i] = 0.0;
        }
        self.t = 0;
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError> {
        check_action(action, 2)?;
        let dt = self.params.dt;
        let mut vel = self.vel;
        let mut pos = self.pos;
        for i in 0..2 {
            vel[i] += action[i] * dt;
            pos[i] += vel[i] * dt;
        }
        let track = (self.cmd[0] - vel[0]).powi(2) + (self.cmd[1] - vel[1]).powi(2);
        let effort = action[0] * action[0] + action[1] * action[1];
        let reward = -self.params.k_c * track - self.params.effort_coef * effort;
        let costs = self.costs(action, pos, vel);
        self.vel = vel;
        self.pos = pos;
        self.t += 1;
        let done = self.t >= self.params.episode_steps;
        Ok(StepOutcome {
            state: self.observe(),
            reward,
            costs,
            done,
            time_limit: done,
        })
    }

    fn mirror(&self) -> Option<MirrorSpec> {
        Some(MirrorSpec {
            state: SignedPermutation::negate(6, &[1, 3, 5]),
            action: SignedPermutation::negate(2, &[1]),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PendulumParams {
    pub k_c: f64,
    pub gravity: f64,
    pub length: f64,
    pub mass: f64,
    pub torque_limit: f64,
    pub dt: f64,
    pub episode_steps: usize,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            k_c: 1.0,
            gravity: 9.81,
            length: 1.0,
            mass: 1.0,
            torque_limit: 2.0,
            dt: 0.05,
            episode_steps: 80,
        }
    }
}

pub const PENDULUM_KERNELS: [KernelInfo; 2] = [
    KernelInfo { name: "torque_limit", kind: P, group_size: 1, default_limit: DEFAULT_PROBABILITY_LIMIT },
    KernelInfo { name: "angle_deviation", kind: A, group_size: 1, default_limit: 0.5 },
];

/// Torque-driven pendulum tracking an angular-velocity command; angle 0 is upright.
///
/// Semi-implicit Euler: `w' = w + dt (g/l sin q + u/(m l^2))`, `q' = q + dt w'`.
/// Observation `[sin q, cos q, w, w_cmd]`.
#[derive(Debug, Clone)]
pub struct Pendulum1 {
    pub params: PendulumParams,
    angle: f64,
    omega: f64,
    cmd: f64,
    t: usize,
}

impl Pendulum1 {
    pub fn new(params: PendulumParams) -> Self {
        Self {
            params,
            angle: 0.0,
            omega: 0.0,
            cmd: 0.0,
            t: 0,
        }
    }

    pub fn set_state(&mut self, angle: f64, omega: f64, cmd: f64) {
        self.angle = angle;
        self.omega = omega;
        self.cmd = cmd;
        self.t = 0;
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    /// Kinetic plus gravitational potential energy.
    pub fn energy(&self) -> f64 {
        let p = &self.params;
        0.5 * p.mass * p.length * p.length * self.omega * self.omega
            + p.mass * p.gravity * p.length * self.angle.cos()
    }

    fn observe(&self) -> Vec<f64> {
        vec![self.angle.sin(), self.angle.cos(), self.omega, self.cmd]
    }
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut w = (a + std::f64::consts::PI) % two_pi;
    if w < 0.0 {
        w += two_pi;
    }
    w - std::f64::consts::PI
}

impl Env for Pendulum1 {
    fn obs_dim(&self) -> usize {
        4
    }

    fn act_dim(&self) -> usize {
        1
    }

    fn episode_steps(&self) -> usize {
        self.params.episode_steps
    }

    fn dt(&self) -> f64 {
        self.params.dt
    }

    fn kernels(&self) -> &[KernelInfo] {
        &PENDULUM_KERNELS
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.angle = rng.random_range(-0.2..=0.2);
        self.omega = 0.0;
        self.cmd = rng.random_range(-1.0..=1.0);
        self.t = 0;
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError> {
        check_action(action, 1)?;
        let p = &self.params;
        let u = action[0];
        let accel = p.gravity / p.length * self.angle.sin() + u / (p.mass * p.length * p.length);
        self.omega += p.dt * accel;
        self.angle += p.dt * self.omega;
        self.t += 1;
        let reward = -p.k_c * (self.cmd - self.omega).powi(2);
        let costs = vec![
            indicator_cost(usize::from(u.abs() > p.torque_limit), 1),
            wrap_angle(self.angle).abs(),
        ];
        let done = self.t >= p.episode_steps;
        Ok(StepOutcome {
            state: self.observe(),
            reward,
            costs,
            done,
            time_limit: done,
        })
    }

    fn mirror(&self) -> Option<MirrorSpec> {
        Some(MirrorSpec {
            state: SignedPermutation::negate(4, &[0, 2, 3]),
            action: SignedPermutation::negate(1, &[0]),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineWorldParams {
    pub target: f64,
    pub speed_limit: f64,
    pub dt: f64,
    pub episode_steps: usize,
}

impl Default for LineWorldParams {
    fn default() -> Self {
        Self {
            target: 1.0,
            speed_limit: 0.5,
            dt: 0.1,
            episode_steps: 10,
        }
    }
}

pub const LINE_WORLD_KERNELS: [KernelInfo; 2] = [
    KernelInfo { name: "speed_limit", kind: P, group_size: 1, default_limit: DEFAULT_PROBABILITY_LIMIT },
    KernelInfo { name: "effort", kind: A, group_size: 1, default_limit: 1.0 },
];

/// 1-D double integrator from rest at the origin, rewarded for reaching `target`.
/// Fully deterministic given the action sequence; the reset seed is ignored.
#[derive(Debug, Clone)]
pub struct LineWorld {
    pub params: LineWorldParams,
    x: f64,
    v: f64,
    t: usize,
}

impl LineWorld {
    pub fn new(params: LineWorldParams) -> Self {
        Self {
            params,
            x: 0.0,
            v: 0.0,
            t: 0,
        }
    }

    /// Continues from an explicit mid-episode state.
    pub fn set_state(&mut self, x: f64, v: f64, t: usize) {
        self.x = x;
        self.v = v;
        self.t = t;
    }
}

impl Env for LineWorld {
    fn obs_dim(&self) -> usize {
        2
    }

    fn act_dim(&self) -> usize {
        1
    }

    fn episode_steps(&self) -> usize {
        self.params.episode_steps
    }

    fn dt(&self) -> f64 {
        self.params.dt
    }

    fn kernels(&self) -> &[KernelInfo] {
        &LINE_WORLD_KERNELS
    }

    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        self.x = 0.0;
        self.v = 0.0;
        self.t = 0;
        vec![self.x, self.v]
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError> {
        check_action(action, 1)?;
        let a = action[0];
        self.v += a * self.params.dt;
        self.x += self.v * self.params.dt;
        self.t += 1;
        let reward = -(self.x - self.params.target).powi(2);
        let costs = vec![
            indicator_cost(usize::from(self.v.abs() > self.params.speed_limit), 1),
            a.abs(),
        ];
        let done = self.t >= self.params.episode_steps;
        Ok(StepOutcome {
            state: vec![self.x, self.v],
            reward,
            costs,
            done,
            time_limit: done,
        })
    }

    fn mirror(&self) -> Option<MirrorSpec> {
        None
    }
}

/// Env selection plus physical parameters, as read from the run config.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvConfig {
    PointMass2D(PointMassParams),
    Pendulum1(PendulumParams),
    LineWorld(LineWorldParams),
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::PointMass2D(PointMassParams::default())
    }
}

impl EnvConfig {
    pub fn from_name(name: &str) -> Result<Self, String> {
        match name {
            "point_mass_2d" => Ok(EnvConfig::PointMass2D(PointMassParams::default())),
            "pendulum_1" => Ok(EnvConfig::Pendulum1(PendulumParams::default())),
            "line_world" => Ok(EnvConfig::LineWorld(LineWorldParams::default())),
            other => Err(format!("unknown env `{other}`")),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::PointMass2D(_) => "point_mass_2d",
            EnvConfig::Pendulum1(_) => "pendulum_1",
            EnvConfig::LineWorld(_) => "line_world",
        }
    }

    pub fn build(&self) -> Box<dyn Env> {
        match self {
            EnvConfig::PointMass2D(p) => Box::new(PointMass2D::new(p.clone())),
            EnvConfig::Pendulum1(p) => Box::new(Pendulum1::new(p.clone())),
            EnvConfig::LineWorld(p) => Box::new(LineWorld::new(p.clone())),
        }
    }

    pub fn kernels(&self) -> &'static [KernelInfo] {
        match self {
            EnvConfig::PointMass2D(_) => &POINT_MASS_KERNELS,
            EnvConfig::Pendulum1(_) => &PENDULUM_KERNELS,
            EnvConfig::LineWorld(_) => &LINE_WORLD_KERNELS,
        }
    }

    pub fn dt(&self) -> f64 {
        match self {
            EnvConfig::PointMass2D(p) => p.dt,
            EnvConfig::Pendulum1(p) => p.dt,
            EnvConfig::LineWorld(p) => p.dt,
        }
    }

    pub fn episode_steps(&self) -> usize {
        match self {
            EnvConfig::PointMass2D(p) => p.episode_steps,
            EnvConfig::Pendulum1(p) => p.episode_steps,
            EnvConfig::LineWorld(p) => p.episode_steps,
        }
    }

    /// Number of kernels enabled in [`EnvConfig::default_cmdp`].
    pub fn default_enabled_kernels(&self) -> usize {
        match self {
            EnvConfig::PointMass2D(_) => 4,
            EnvConfig::Pendulum1(_) | EnvConfig::LineWorld(_) => 2,
        }
    }

    /// Every kernel of the env at its default limit, the first
    /// [`default_enabled_kernels`](Self::default_enabled_kernels) enabled, plus
    /// an enabled symmetry constraint when the env has a mirror.
    pub fn default_cmdp(&self, gamma: f64) -> CmdpSpec {
        let enabled = self.default_enabled_kernels();
        let mut constraints: Vec<ConstraintSpec> = self
            .kernels()
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let mut c = ConstraintSpec::new(i, k.name, k.kind, k.default_limit, k.group_size);
                c.enabled = i < enabled;
                c
            })
            .collect();
        if self.build().mirror().is_some() {
            constraints.insert(
                enabled,
                ConstraintSpec::new(enabled, "symmetry", ConstraintKind::Symmetry, DEFAULT_SYMMETRY_LIMIT, 1),
            );
        }
        renumber(&mut constraints);
        let steps = self.episode_steps();
        CmdpSpec {
            gamma,
            constraints,
            env_name: self.name().to_string(),
            episode_steps: steps,
            dt: self.dt(),
            episode_length: steps as f64 * self.dt(),
        }
    }

    /// Physical parameters as `(key, value)` pairs, in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, f64)> {
        match self {
            EnvConfig::PointMass2D(p) => vec![
                ("k_c", p.k_c),
                ("effort_coef", p.effort_coef),
                ("box_half_width", p.box_half_width),
                ("act_bound", p.act_bound),
                ("speed_limit", p.speed_limit),
                ("cmd_range", p.cmd_range),
                ("dt", p.dt),
                ("episode_steps", p.episode_steps as f64),
            ],
            EnvConfig::Pendulum1(p) => vec![
                ("k_c", p.k_c),
                ("gravity", p.gravity),
                ("length", p.length),
                ("mass", p.mass),
                ("torque_limit", p.torque_limit),
                ("dt", p.dt),
                ("episode_steps", p.episode_steps as f64),
            ],
            EnvConfig::LineWorld(p) => vec![
                ("target", p.target),
                ("speed_limit", p.speed_limit),
                ("dt", p.dt),
                ("episode_steps", p.episode_steps as f64),
            ],
        }
    }

    pub fn set_param(&mut self, key: &str, value: f64) -> Result<(), String> {
        let steps = || -> Result<usize, String> {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(format!("episode_steps must be a positive integer, got {value}"))
            }
        };
        let slot: &mut f64 = match (self, key) {
            (EnvConfig::PointMass2D(p), "episode_steps") => {
                p.episode_steps = steps()?;
                return Ok(());
            }
            (EnvConfig::Pendulum1(p), "episode_steps") => {
                p.episode_steps = steps()?;
                return Ok(());
            }
            (EnvConfig::LineWorld(p), "episode_steps") => {
                p.episode_steps = steps()?;
                return Ok(());
            }
            (EnvConfig::PointMass2D(p), "k_c") => &mut p.k_c,
            (EnvConfig::PointMass2D(p), "effort_coef") => &mut p.effort_coef,
            (EnvConfig::PointMass2D(p), "box_half_width") => &mut p.box_half_width,
            (EnvConfig::PointMass2D(p), "act_bound") => &mut p.act_bound,
            (EnvConfig::PointMass2D(p), "speed_limit") => &mut p.speed_limit,
            (EnvConfig::PointMass2D(p), "cmd_range") => &mut p.cmd_range,
            (EnvConfig::PointMass2D(p), "dt") => &mut p.dt,
            (EnvConfig::Pendulum1(p), "k_c") => &mut p.k_c,
            (EnvConfig::Pendulum1(p), "gravity") => &mut p.gravity,
            (EnvConfig::Pendulum1(p), "length") => &mut p.length,
            (EnvConfig::Pendulum1(p), "mass") => &mut p.mass,
            (EnvConfig::Pendulum1(p), "torque_limit") => &mut p.torque_limit,
            (EnvConfig::Pendulum1(p), "dt") => &mut p.dt,
            (EnvConfig::LineWorld(p), "target") => &mut p.target,
            (EnvConfig::LineWorld(p), "speed_limit") => &mut p.speed_limit,
            (EnvConfig::LineWorld(p), "dt") => &mut p.dt,
            (env, key) => return Err(format!("unknown parameter `{key}` for env {}", env.name())),
        };
        if !value.is_finite() {
            return Err(format!("parameter `{key}` must be finite"));
        }
        *slot = value;
        Ok(())
    }
}
