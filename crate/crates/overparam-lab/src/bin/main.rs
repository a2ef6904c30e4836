//! Command-line entry point for the experiment harness.
//!
//! Exit codes: 0 on success (and all verification checks passing), 1 on a
//! failed verification or runtime error, 2 on usage/config errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use overparam_lab::harness::{emit_plots, run_sweep, run_verification, summary_from_csv, ExperimentConfig};
use overparam_lab::LabError;

#[derive(Parser)]
#[command(name = "overparam-lab", version, about = "Experiment harness for overparameterized ReLU learners")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Use the full-scale hyperparameter profile instead of the quick one.
    #[arg(long)]
    paper_scale: bool,
    /// Output directory (falls back to the config's out_dir, then "out").
    #[arg(long, env = "OVERPARAM_LAB_OUT")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured task for a single seed.
    Train(CommonOpts),
    /// Run the configured task over the full seed list.
    Sweep(CommonOpts),
    /// Run a named verification suite (hermite, interval, fit, wstar,
    /// coupling, gradients) and write its JSON report.
    Verify {
        suite: String,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, env = "OVERPARAM_LAB_OUT", default_value = "out")]
        out: PathBuf,
    },
    /// Re-render figures from an existing summary.csv.
    Plot {
        #[arg(long, env = "OVERPARAM_LAB_OUT", default_value = "out")]
        out: PathBuf,
    },
}

fn load_config(opts: &CommonOpts, force_single_seed: bool) -> Result<ExperimentConfig, LabError> {
    let mut cfg = ExperimentConfig::load(&opts.config)?;
    if let Some(seed) = opts.seed {
        cfg.seeds = vec![seed];
    } else if force_single_seed {
        cfg.seeds.truncate(1);
    }
    if opts.paper_scale {
        cfg.paper_scale = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(opts: &CommonOpts, cfg: &ExperimentConfig) -> PathBuf {
    opts.out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn run() -> Result<(), LabError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(opts) => {
            let cfg = load_config(&opts, true)?;
            let out = out_dir(&opts, &cfg);
            let summary = run_sweep(&cfg, &out, opts.jobs)?;
            println!(
                "wrote {} summary cells to {} (config {})",
                summary.cells.len(),
                out.display(),
                summary.config_hash
            );
            Ok(())
        }
        Command::Sweep(opts) => {
            let cfg = load_config(&opts, false)?;
            let out = out_dir(&opts, &cfg);
            let summary = run_sweep(&cfg, &out, opts.jobs)?;
            if !summary.cells.is_empty() {
                emit_plots(&summary, &out)?;
            }
            println!(
                "wrote {} summary cells to {} (config {})",
                summary.cells.len(),
                out.display(),
                summary.config_hash
            );
            Ok(())
        }
        Command::Verify { suite, jobs, out } => {
            let report = run_verification(&suite, &out, jobs)?;
            for c in &report.checks {
                println!(
                    "[{}] {}: {}",
                    if c.passed { "pass" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            if report.passed {
                println!("suite '{suite}' passed");
                Ok(())
            } else {
                Err(LabError::ConstructionFailure(format!(
                    "suite '{suite}' failed"
                )))
            }
        }
        Command::Plot { out } => {
            let path = out.join("summary.csv");
            let text = std::fs::read_to_string(&path).map_err(|e| {
                LabError::Usage(format!("cannot read {}: {e}", path.display()))
            })?;
            let summary = summary_from_csv(&text)?;
            let written = emit_plots(&summary, &out)?;
            for p in written {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ LabError::Usage(_)) | Err(e @ LabError::InvalidParameter(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
