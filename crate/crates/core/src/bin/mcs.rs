//! `mcs`: degradation synthesis, sampling experiments, trajectory statistics
//! and parameter sweeps.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mcs_core::harness::{
    degrade_batch, list_pgm_inputs, parse_grid, read_trajectory_csv, run_experiment, stats_csv,
    sweep, sweep_csv, trajectory_stats, ExperimentConfig, SamplerKind, SeedList, SweepAxis,
};
use mcs_core::{Error, Result};

#[derive(Parser)]
#[command(name = "mcs", version, about = "Measurement-constrained diffusion sampling toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize low-quality images (blur, pool, noise, JPEG) and a manifest.
    Degrade {
        /// Input PGM file or directory of PGM files.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = ["4", "8", "16"])]
        scale: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override drawn parameters, e.g. "sigma=2,delta=5,q=80".
        #[arg(long)]
        spec: Option<String>,
    },
    /// Run a sampling experiment and write images, trajectories and a report.
    Sample {
        #[arg(long)]
        config: PathBuf,
        /// mcs, dps, ddnm or unguided.
        #[arg(long)]
        sampler: Option<String>,
        /// Comma-separated labels or "null".
        #[arg(long)]
        condition: Option<String>,
        /// "a..b", "a..=b" or a comma list.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-snapshot statistics of a trajectory CSV.
    Stats {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeat an experiment over a grid of boundary or weight-ratio values.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// boundary or ratio.
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. "2/1,1/1,1/2" or "0.9,0.6,0.3".
        #[arg(long)]
        grid: String,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Degrade {
            input,
            out,
            scale,
            seed,
            spec,
        } => {
            let scale: usize = scale.parse().expect("restricted by clap");
            let inputs = list_pgm_inputs(&input)?;
            let entries = degrade_batch(&inputs, &out, scale, seed, spec.as_deref())?;
            eprintln!("degraded {} image(s) into {}", entries.len(), out.display());
        }
        Command::Sample {
            config,
            sampler,
            condition,
            seeds,
            out,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = sampler {
                cfg.sampler = s.parse::<SamplerKind>()?;
            }
            if let Some(c) = condition {
                cfg.condition = c;
            }
            if let Some(s) = seeds {
                cfg.seeds = s.parse::<SeedList>()?;
            }
            if out.is_some() {
                cfg.output_dir = out;
            }
            cfg.validate()?;
            let report = run_experiment(&cfg)?;
            let a = &report.aggregates;
            println!(
                "sampler={} condition={} runs={} response_rate={:.4} mean_residual={:.6e}",
                report.sampler, report.condition, a.runs, a.response_rate, a.mean_residual
            );
            for (label, n) in &a.label_counts {
                println!("label {label}: {n}");
            }
            if cfg.output_dir.is_none() {
                println!("{}", report.to_json());
            }
        }
        Command::Stats { traj, out } => {
            let rows = trajectory_stats(&read_trajectory_csv(&traj)?)?;
            emit(&stats_csv(&rows), out.as_deref())?;
        }
        Command::Sweep {
            config,
            axis,
            grid,
            seeds,
            out,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seeds {
                cfg.seeds = s.parse::<SeedList>()?;
            }
            let rows = sweep(&cfg, axis.parse::<SweepAxis>()?, &parse_grid(&grid)?)?;
            emit(&sweep_csv(&rows), out.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors; 2 is reserved for numerical aborts here.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
