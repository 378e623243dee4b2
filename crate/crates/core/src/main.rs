use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use ipo_core::harness::{self, RunConfig};

#[derive(Parser)]
#[command(name = "ipo", about = "Log-barrier constrained policy optimization on toy control tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one policy and write metrics, checkpoints and a constraint summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Roll out a checkpointed policy with mean actions.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
    },
    /// Grid over barrier steepness and threshold enlargement.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [10.0, 100.0, 1000.0])]
        t: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.02])]
        alpha: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Constrained vs fixed-penalty training, and policy-step timing over constraint counts.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 5, 10])]
        ks: Vec<usize>,
        /// Penalty weights: one value for every enabled constraint, or one per constraint.
        #[arg(long, value_delimiter = ',', default_values_t = [1.0])]
        penalty: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value_t = 10)]
        timing_iterations: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let overrides = RunConfig::env_overrides(std::env::vars());
    RunConfig::parse_with_overrides(&text, &overrides)
        .map_err(|e| anyhow::anyhow!("invalid config {}:\n{e}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            resume,
        } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.trainer.seed = s;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let outcome = harness::train(&cfg, resume.as_deref())?;
            print!(
                "{}",
                std::fs::read_to_string(cfg.output_dir.join("summary.txt")).unwrap_or_default()
            );
            eprintln!("{} iterations written to {}", outcome.reports.len(), cfg.output_dir.display());
        }
        Command::Eval { checkpoint, episodes } => {
            let r = harness::eval(&checkpoint, episodes)?;
            println!("episodes: {}", r.episodes);
            println!("mean return: {:.6}", r.mean_return);
            println!("mean step reward: {:.6}", r.mean_step_reward);
            println!("{:<22} {:>14} {:>14}", "constraint", "j_c", "limit");
            for (name, j, d) in r.constraints {
                println!("{name:<22} {j:>14.6} {d:>14.6}");
            }
        }
        Command::Sweep {
            config,
            t,
            alpha,
            seeds,
            out,
        } => {
            let cfg = load(&config)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join("sweep"));
            let cells = harness::sweep(&cfg, &t, &alpha, seeds, &out)?;
            let names = cells.first().map(|c| c.names.clone()).unwrap_or_default();
            print!("{}", harness::experiments::render_sweep(&cells, &names));
            for c in cells.iter().filter(|c| !c.failures.is_empty()) {
                eprintln!("t={} alpha={}: {}", c.t, c.alpha, c.failures.join("; "));
            }
        }
        Command::Compare {
            config,
            ks,
            penalty,
            seeds,
            timing_iterations,
            out,
        } => {
            let cfg = load(&config)?;
            let k = cfg.trainer.cmdp.num_enabled();
            let weights = if penalty.len() == 1 { vec![penalty[0]; k] } else { penalty };
            let out = out.unwrap_or_else(|| cfg.output_dir.join("compare"));
            let o = harness::compare(&cfg, &weights, seeds, &ks, timing_iterations, &out)?;
            print!("{}", harness::experiments::render_compare(&o));
            println!();
            print!("{}", harness::experiments::render_timing(&o.timing));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
