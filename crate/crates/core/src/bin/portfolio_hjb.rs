use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use portfolio_hjb::config::{self, Overrides, RunConfig, SolverKind};
use portfolio_hjb::exec;
use portfolio_hjb::io::{self, EXIT_ABORT, EXIT_CONFIG};

/// Solve the finite-horizon investment-consumption problem with proportional
/// transaction costs and write slices, regions, boundaries and checks.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Cli {
    /// Built-in experiment: test1, test2a, test2b, test3a, test3b, merton-smallcost.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (replaces an earlier run's output).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Monte Carlo samples per node.
    #[arg(long)]
    paths: Option<usize>,
    /// Time step; rounded so that it divides the horizon.
    #[arg(long)]
    dt: Option<f64>,
    /// Grid spacing for every axis.
    #[arg(long)]
    dy: Option<f64>,
    /// mc, fd1d or both.
    #[arg(long)]
    solver: Option<SolverKind>,
    /// Skip the projection step and expose the unconstrained PDE solution.
    #[arg(long)]
    no_adjust: bool,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Write the resolved configuration to this file and exit.
    #[arg(long)]
    write_config: Option<PathBuf>,
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

fn load(cli: &Cli) -> portfolio_hjb::error::Result<RunConfig> {
    let mut cfg = match (&cli.preset, &cli.config) {
        (Some(name), _) => RunConfig::preset(name)?,
        (None, Some(path)) => config::load_config(&path.to_string_lossy())?,
        (None, None) => {
            return Err(portfolio_hjb::error::Error::Config(
                "give --preset or --config".into(),
            ));
        }
    };
    cfg.apply(&Overrides {
        out_dir: cli.out_dir.clone(),
        seed: cli.seed,
        paths: cli.paths,
        dt: cli.dt,
        dy: cli.dy,
        solver: cli.solver,
        no_adjust: cli.no_adjust,
    })?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let cfg = match load(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    if let Some(path) = &cli.write_config {
        let written = config::write_config(&cfg)
            .and_then(|text| std::fs::write(path, text).map_err(Into::into));
        return match written {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("cannot write {}: {e}", path.display());
                ExitCode::from(EXIT_ABORT as u8)
            }
        };
    }

    let outcome = match cli.threads {
        Some(n) => exec::with_threads(n, || io::run(&cfg)),
        None => io::run(&cfg),
    };
    match outcome {
        Ok(summary) => {
            for c in &summary.checks {
                println!(
                    "{} {} (margin {})",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.property,
                    c.margin
                );
            }
            println!("output written to {}", summary.out_dir.display());
            ExitCode::from(summary.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("run aborted: {e}");
            ExitCode::from(EXIT_ABORT as u8)
        }
    }
}
