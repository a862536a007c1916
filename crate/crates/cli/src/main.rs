use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use memsgd::experiment::{self, ExperimentConfig};
use memsgd::fit::{fit_exponent, parse_window};
use memsgd::LossTrajectory;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Exact and Monte Carlo dynamics of SGD with memory on power-law quadratics.
#[derive(Parser)]
#[command(name = "memsgd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every experiment in a config; exits nonzero if an expectation fails.
    Run {
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Memory-1 stability and noise-sum scan over the config's [scan] grid.
    StabilityScan {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Propagator series and sums for the config's stationary runs.
    Propagators {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a power law to a loss CSV.
    Fit {
        csv: PathBuf,
        /// Window as lo:hi, e.g. 1000:1e5. Defaults to [T/100, T].
        #[arg(long)]
        window: Option<String>,
    },
}

fn load(path: &Path) -> Result<(ExperimentConfig, PathBuf)> {
    let cfg = ExperimentConfig::load(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out } => {
            let (cfg, base) = load(&config)?;
            let report = experiment::run_experiment(&cfg, &base, out.as_deref())?;
            for r in &report.runs {
                let fit = r.fit.as_ref().map_or_else(|| "-".to_string(), |f| format!("{:.4}", f.exponent));
                let pred = r.predicted.as_ref().map_or_else(|| "-".to_string(), |p| format!("{:.4}", p.exponent));
                let status = if r.pass() { "ok" } else { "FAIL" };
                println!("{:<24} {:<10} xi={fit:<8} predicted={pred:<8} diverged={:?} {status}", r.name, r.engine.to_string(), r.diverged_at);
                for e in r.expectations.iter().filter(|e| !e.pass) {
                    println!("    expectation failed: {}", e.detail);
                }
            }
            if let Some(a) = &report.grid_agreement {
                println!("grid: {}", a.detail);
            }
            Ok(if report.all_pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::StabilityScan { config, out } => {
            let (cfg, base) = load(&config)?;
            let path = experiment::run_stability_scan(&cfg, &base, out.as_deref())?;
            println!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Propagators { config, out } => {
            let (cfg, base) = load(&config)?;
            for r in experiment::run_propagators(&cfg, &base, out.as_deref())? {
                match &r.sums {
                    Some(s) => println!("{:<24} U_sigma={:.6} U'_sigma={:.6} -> {}", r.run, s.u_sigma, s.u_prime_sigma, r.csv.display()),
                    None => println!("{:<24} {} -> {}", r.run, r.error.as_deref().unwrap_or(""), r.csv.display()),
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Fit { csv, window } => {
            let traj = LossTrajectory::load_csv(&csv).with_context(|| format!("reading {}", csv.display()))?;
            let window = window.as_deref().map(parse_window).transpose()?;
            let fit = fit_exponent(&traj, window)?;
            println!("{}", serde_json::to_string_pretty(&fit)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}
