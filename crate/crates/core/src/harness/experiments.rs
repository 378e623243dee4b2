use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use super::config::RunConfig;
use super::metrics::{
    metrics_header, metrics_row, parse_metrics, render_summary, timing_row, FinalStats, SummaryRow, TIMING_HEADER,
};
use crate::barrier::trainer::{resolve_constraints, Checkpoint, ConstraintSlot, IterationReport, Mode, Trainer};
use crate::cmdp::ConstraintKind;
use crate::nn::symmetry_value;
use ndarray::Array2;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Everything a finished training run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub reports: Vec<IterationReport>,
    pub summary: Vec<SummaryRow>,
    pub stats: Option<FinalStats>,
}

fn summary_rows(cfg: &RunConfig, slots: &[ConstraintSlot], stats: Option<&FinalStats>) -> Vec<SummaryRow> {
    slots
        .iter()
        .enumerate()
        .map(|(k, slot)| {
            let spec = cfg
                .trainer
                .cmdp
                .constraints
                .iter()
                .find(|c| c.name == slot.name)
                .expect("slot comes from the spec");
            SummaryRow {
                name: slot.name.clone(),
                kind: spec.kind.to_string(),
                limit: spec.limit,
                scaled_limit: slot.limit,
                final_j_c: stats.map_or(f64::NAN, |s| s.j_c[k]),
            }
        })
        .collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn save_checkpoint(trainer: &Trainer, cfg: &RunConfig, out: &Path, keep: bool) -> Result<()> {
    let bytes = trainer.checkpoint(&cfg.serialize());
    write_atomic(&out.join(CHECKPOINT_FILE), &bytes)?;
    if keep {
        let dir = out.join("checkpoints");
        fs::create_dir_all(&dir)?;
        write_atomic(&dir.join(format!("iter_{:06}.bin", trainer.iteration)), &bytes)?;
    }
    Ok(())
}

fn finite(r: &IterationReport) -> bool {
    [r.mean_reward, r.kl, r.value_loss, r.cost_loss]
        .iter()
        .chain(&r.j_c)
        .chain(&r.d_i)
        .all(|v| v.is_finite())
}

/// Runs the configured number of iterations into `cfg.output_dir`, writing
/// `config.txt`, `metrics.csv`, `timing.csv`, checkpoints and `summary.txt`.
///
/// With `resume`, training state comes from that checkpoint and metrics rows
/// at or past its iteration are dropped before new rows are appended.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.txt"), cfg.serialize())?;

    let (mut trainer, mut reports, timing_rows) = match resume {
        Some(path) => {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let ckpt = Checkpoint::decode(&bytes)?;
            let trainer = Trainer::resume(cfg.trainer.clone(), &ckpt)?;
            let keep = |iter: u64| iter < ckpt.iteration;
            let reports = match fs::read_to_string(out.join("metrics.csv")) {
                Ok(text) => parse_metrics(&text)?.1.into_iter().filter(|r| keep(r.iter)).collect(),
                Err(_) => Vec::new(),
            };
            let timing: Vec<String> = fs::read_to_string(out.join("timing.csv"))
                .unwrap_or_default()
                .lines()
                .skip(1)
                .filter(|l| l.split(',').next().and_then(|c| c.parse().ok()).is_some_and(keep))
                .map(str::to_string)
                .collect();
            (trainer, reports, timing)
        }
        None => (Trainer::new(cfg.trainer.clone())?, Vec::new(), Vec::new()),
    };

    let names: Vec<String> = trainer.slots.iter().map(|s| s.name.clone()).collect();
    let mut metrics = std::io::BufWriter::new(fs::File::create(out.join("metrics.csv"))?);
    let mut timing = std::io::BufWriter::new(fs::File::create(out.join("timing.csv"))?);
    writeln!(metrics, "{}", metrics_header(&names))?;
    writeln!(timing, "{TIMING_HEADER}")?;
    for r in &reports {
        writeln!(metrics, "{}", metrics_row(r))?;
    }
    for row in &timing_rows {
        writeln!(timing, "{row}")?;
    }

    while trainer.iteration < cfg.iterations {
        let report = match trainer.train_iteration() {
            Ok(r) if finite(&r) => r,
            Ok(r) => {
                metrics.flush()?;
                save_checkpoint(&trainer, cfg, out, false)?;
                bail!("non-finite metrics at iteration {}", r.iter);
            }
            Err(e) => {
                metrics.flush()?;
                save_checkpoint(&trainer, cfg, out, false)?;
                return Err(e).context(format!("iteration {}", trainer.iteration));
            }
        };
        writeln!(metrics, "{}", metrics_row(&report))?;
        writeln!(timing, "{}", timing_row(&report))?;
        reports.push(report);
        if cfg.checkpoint_every > 0 && trainer.iteration % cfg.checkpoint_every == 0 {
            metrics.flush()?;
            save_checkpoint(&trainer, cfg, out, true)?;
        }
    }
    metrics.flush()?;
    timing.flush()?;
    save_checkpoint(&trainer, cfg, out, false)?;

    let stats = FinalStats::from_reports(&reports);
    let summary = summary_rows(cfg, &trainer.slots, stats.as_ref());
    let text = match &stats {
        Some(s) => render_summary(&summary, s, reports.len()),
        None => "iterations: 0\n".to_string(),
    };
    fs::write(out.join("summary.txt"), text)?;
    Ok(TrainOutcome {
        reports,
        summary,
        stats,
    })
}

/// Greedy (mean-action) rollouts of a checkpointed policy.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean_return: f64,
    pub mean_step_reward: f64,
    /// `(name, estimated j_c, limit on the j_c scale)` per enabled constraint.
    pub constraints: Vec<(String, f64, f64)>,
}

pub fn eval(checkpoint: &Path, episodes: usize) -> Result<EvalReport> {
    let bytes = fs::read(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let ckpt = Checkpoint::decode(&bytes)?;
    let cfg = RunConfig::parse(&ckpt.meta).map_err(|e| anyhow::anyhow!("checkpoint config: {e}"))?;
    let t = &cfg.trainer;
    let mut env = t.env.build();
    let mirror = env.mirror();
    let slots = resolve_constraints(&t.cmdp, &t.env, mirror.is_some())?;
    let gamma = t.cmdp.gamma;
    let obs_dim = env.obs_dim();

    let (mut total, mut steps) = (0.0, 0usize);
    let mut cost_sums = vec![0.0; env.kernels().len()];
    let mut visited: Vec<f64> = Vec::new();
    for ep in 0..episodes {
        let mut state = env.reset(ckpt.seed.wrapping_add(1 << 32).wrapping_add(ep as u64));
        loop {
            let s = Array2::from_shape_vec((1, obs_dim), state.clone())?;
            let (means, _) = ckpt.policy.forward(s.view())?;
            visited.extend_from_slice(&state);
            let out = env.step(means.row(0).as_slice().expect("row"))?;
            total += out.reward;
            steps += 1;
            for (acc, c) in cost_sums.iter_mut().zip(&out.costs) {
                *acc += c;
            }
            state = out.state;
            if out.done {
                break;
            }
        }
    }
    let states = Array2::from_shape_vec((steps, obs_dim), visited)?;
    let mut constraints = Vec::new();
    for slot in &slots {
        let j = match slot.source {
            crate::barrier::trainer::ConstraintSource::Kernel { kernel, .. } => {
                cost_sums[kernel] / steps.max(1) as f64 / (1.0 - gamma)
            }
            crate::barrier::trainer::ConstraintSource::Symmetry => {
                symmetry_value(&ckpt.policy, states.view(), mirror.as_ref().expect("resolved"))?
            }
        };
        constraints.push((slot.name.clone(), j, slot.limit));
    }
    Ok(EvalReport {
        episodes,
        mean_return: total / episodes.max(1) as f64,
        mean_step_reward: total / steps.max(1) as f64,
        constraints,
    })
}

/// Seed-averaged results of one `(t, alpha)` sweep cell.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub t: f64,
    pub alpha: f64,
    pub runs: Vec<FinalStats>,
    pub failures: Vec<String>,
    pub names: Vec<String>,
    pub limits: Vec<f64>,
}

impl SweepCell {
    fn mean_of(&self, f: impl Fn(&FinalStats) -> f64) -> f64 {
        self.runs.iter().map(f).sum::<f64>() / self.runs.len().max(1) as f64
    }

    pub fn mean_reward(&self) -> f64 {
        self.mean_of(|s| s.mean_reward)
    }

    pub fn acceptance_rate(&self) -> f64 {
        self.mean_of(|s| s.acceptance_rate)
    }

    pub fn mean_j_c(&self) -> Vec<f64> {
        (0..self.limits.len()).map(|k| self.mean_of(|s| s.j_c[k])).collect()
    }

    /// `(limit - j_c) / limit` per constraint; negative means violated.
    pub fn relative_margins(&self) -> Vec<f64> {
        self.mean_j_c()
            .iter()
            .zip(&self.limits)
            .map(|(j, d)| (d - j) / d)
            .collect()
    }
}

fn cell_dir(out: &Path, t: f64, alpha: f64) -> PathBuf {
    out.join(format!("t{t}_alpha{alpha}"))
}

/// One sub-run per `(t, alpha, seed)`; failures are recorded and the sweep continues.
pub fn sweep(base: &RunConfig, ts: &[f64], alphas: &[f64], seeds: u64, out: &Path) -> Result<Vec<SweepCell>> {
    let slots = resolve_constraints(&base.trainer.cmdp, &base.trainer.env, base.trainer.env.build().mirror().is_some())?;
    let names: Vec<String> = slots.iter().map(|s| s.name.clone()).collect();
    let limits: Vec<f64> = slots.iter().map(|s| s.limit).collect();
    let mut cells = Vec::new();
    for &t in ts {
        for &alpha in alphas {
            let mut cell = SweepCell {
                t,
                alpha,
                runs: Vec::new(),
                failures: Vec::new(),
                names: names.clone(),
                limits: limits.clone(),
            };
            for s in 0..seeds {
                let mut cfg = base.clone();
                cfg.trainer.barrier.t = t;
                cfg.trainer.barrier.alpha = alpha;
                cfg.trainer.seed = base.trainer.seed + s;
                cfg.output_dir = cell_dir(out, t, alpha).join(format!("seed{}", cfg.trainer.seed));
                match train(&cfg, None) {
                    Ok(o) => cell.runs.extend(o.stats),
                    Err(e) => cell.failures.push(format!("seed {}: {e:#}", cfg.trainer.seed)),
                }
            }
            cells.push(cell);
        }
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("sweep.csv"), render_sweep(&cells, &names))?;
    Ok(cells)
}

pub fn render_sweep(cells: &[SweepCell], names: &[String]) -> String {
    let mut s = String::from("t,alpha,runs,failures,final_reward,acceptance_rate");
    for n in names {
        s.push_str(&format!(",j_c.{n}"));
    }
    for n in names {
        s.push_str(&format!(",margin.{n}"));
    }
    s.push('\n');
    for c in cells {
        s.push_str(&format!(
            "{},{},{},{},{:.6},{:.4}",
            c.t,
            c.alpha,
            c.runs.len(),
            c.failures.len(),
            c.mean_reward(),
            c.acceptance_rate()
        ));
        for v in c.mean_j_c().iter().chain(&c.relative_margins()) {
            s.push_str(&format!(",{v:.6}"));
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct CompareRow {
    pub mode: &'static str,
    pub seed: u64,
    pub stats: FinalStats,
    pub satisfied: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub k: usize,
    pub median_policy_step_ms: f64,
    pub median_collect_ms: f64,
    pub median_critic_ms: f64,
}

#[derive(Debug, Clone)]
pub struct CompareOutcome {
    pub names: Vec<String>,
    pub limits: Vec<f64>,
    pub rows: Vec<CompareRow>,
    pub timing: Vec<TimingRow>,
}

pub fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// Per-phase median wall times over `iterations` iterations with exactly the
/// first `k` kernel constraints enabled.
pub fn time_policy_step(base: &RunConfig, k: usize, iterations: u64) -> Result<TimingRow> {
    let mut cfg = base.clone().with_first_kernels(k);
    cfg.trainer.mode = Mode::Constrained;
    let mut trainer = Trainer::new(cfg.trainer)?;
    let (mut step, mut collect, mut critic) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..iterations {
        let r = trainer.train_iteration()?;
        step.push(r.wall_times.policy_step * 1e3);
        collect.push(r.wall_times.collect * 1e3);
        critic.push(r.wall_times.critic * 1e3);
    }
    Ok(TimingRow {
        k,
        median_policy_step_ms: median(&mut step),
        median_collect_ms: median(&mut collect),
        median_critic_ms: median(&mut critic),
    })
}

/// Constrained vs fixed-penalty training on identical seeds, plus a policy-step
/// timing table over constraint counts `ks`.
pub fn compare(
    base: &RunConfig,
    penalty: &[f64],
    seeds: u64,
    ks: &[usize],
    timing_iterations: u64,
    out: &Path,
) -> Result<CompareOutcome> {
    let slots = resolve_constraints(&base.trainer.cmdp, &base.trainer.env, base.trainer.env.build().mirror().is_some())?;
    let names: Vec<String> = slots.iter().map(|s| s.name.clone()).collect();
    let limits: Vec<f64> = slots.iter().map(|s| s.limit).collect();
    let mut rows = Vec::new();
    for s in 0..seeds {
        for (mode_name, mode) in [("constrained", Mode::Constrained), ("penalty", Mode::Penalty(penalty.to_vec()))] {
            let mut cfg = base.clone();
            cfg.trainer.mode = mode;
            cfg.trainer.seed = base.trainer.seed + s;
            cfg.output_dir = out.join(format!("{mode_name}_seed{}", cfg.trainer.seed));
            let outcome = train(&cfg, None)?;
            let stats = outcome.stats.context("comparison needs at least one iteration")?;
            let satisfied = stats.j_c.iter().zip(&limits).map(|(j, d)| j <= d).collect();
            rows.push(CompareRow {
                mode: mode_name,
                seed: cfg.trainer.seed,
                stats,
                satisfied,
            });
        }
    }
    let mut timing = Vec::new();
    for &k in ks {
        timing.push(time_policy_step(base, k, timing_iterations)?);
    }
    let outcome = CompareOutcome {
        names,
        limits,
        rows,
        timing,
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("compare.csv"), render_compare(&outcome))?;
    fs::write(out.join("timing.csv"), render_timing(&outcome.timing))?;
    Ok(outcome)
}

pub fn render_compare(o: &CompareOutcome) -> String {
    let mut s = String::from("mode,seed,final_reward");
    for n in &o.names {
        s.push_str(&format!(",j_c.{n},satisfied.{n}"));
    }
    s.push('\n');
    for r in &o.rows {
        s.push_str(&format!("{},{},{:.6}", r.mode, r.seed, r.stats.mean_reward));
        for (j, ok) in r.stats.j_c.iter().zip(&r.satisfied) {
            s.push_str(&format!(",{j:.6},{}", u8::from(*ok)));
        }
        s.push('\n');
    }
    s
}

pub fn render_timing(rows: &[TimingRow]) -> String {
    let mut s = String::from("k,median_policy_step_ms,median_collect_ms,median_critic_ms\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.3},{:.3},{:.3}\n",
            r.k, r.median_policy_step_ms, r.median_collect_ms, r.median_critic_ms
        ));
    }
    s
}

/// Kind of every enabled constraint, in report order.
pub fn enabled_kinds(cfg: &RunConfig) -> Vec<ConstraintKind> {
    cfg.trainer.cmdp.enabled().map(|c| c.kind).collect()
}
