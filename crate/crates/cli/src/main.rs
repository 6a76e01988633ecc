use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use wonham_mv::ObjectiveConvention;
use wonham_mv_cli::commands;
use wonham_mv_cli::config::{parse_ladder, parse_list, LoadedConfig, Overrides};
use wonham_mv_cli::CliError;

/// Attention-constrained mean-variance portfolios under a hidden Markov regime.
#[derive(Debug, Parser)]
#[command(name = "wonham-mv", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration; the shipped default is used if omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    h1: Option<f64>,

    #[arg(long, global = true)]
    h2: Option<f64>,

    /// Number of Monte Carlo paths for both the chain and the diffusion.
    #[arg(long, global = true)]
    paths: Option<usize>,

    /// Comma-separated cost coefficients, e.g. `0.1,0.3,0.5`.
    #[arg(long, global = true, value_parser = parse_list)]
    sweep_k: Option<::std::vec::Vec<f64>>,

    /// Comma-separated `h1:h2` rungs, coarse to fine.
    #[arg(long, global = true, value_parser = parse_ladder)]
    ladder: Option<::std::vec::Vec<[f64; 2]>>,

    /// `mean-minus-variance` or `paper-literal`.
    #[arg(long, global = true)]
    convention: Option<ObjectiveConvention>,

    /// Comma-separated times at which full slices are written.
    #[arg(long, global = true, value_parser = parse_list)]
    slice_times: Option<::std::vec::Vec<f64>>,

    /// Also dump the stencil of every written slice.
    #[arg(long, global = true)]
    debug_stencils: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Backward recursion; writes value, mean and policy slices.
    Solve,
    /// Chain and Euler simulation under the computed policy.
    Simulate,
    /// Solve once per cost coefficient.
    SweepK,
    /// Property suite; exits with 4 if any property fails.
    Check,
    /// Solve along the refinement ladder.
    Refine,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut loaded = match &cli.config {
        Some(path) => LoadedConfig::from_file(path)?,
        None => LoadedConfig::builtin(),
    };
    loaded.apply(&Overrides {
        output_dir: cli.output_dir,
        seed: cli.seed,
        h1: cli.h1,
        h2: cli.h2,
        paths: cli.paths,
        sweep_k: cli.sweep_k,
        ladder: cli.ladder,
        convention: cli.convention,
        slice_times: cli.slice_times,
        debug_stencils: cli.debug_stencils,
    });
    let dir = loaded.config.output.dir.display().to_string();
    match cli.command {
        Command::Solve => {
            let run = commands::cmd_solve(&loaded)?;
            let e = &run.manifest.evaluation;
            println!(
                "V({}, {}, {:?}) = {}, g = {}; wrote {dir}/manifest.json",
                e.t, e.x, e.phi, e.value, e.g
            );
        }
        Command::Simulate => {
            let a = commands::cmd_simulate(&loaded)?.agreement;
            println!(
                "g0 = {}, chain mean = {} (se {}), sde mean = {} (se {}), C_fit = {}; wrote {dir}/simulate.json",
                a.g0, a.chain.mean_xt, a.chain.se_mean, a.sde.mean_xt, a.sde.se_mean, a.c_fit
            );
        }
        Command::SweepK => {
            let s = commands::cmd_sweep_k(&loaded)?;
            for e in &s.entries {
                println!("k = {}: V = {}", e.k, e.evaluation.value);
            }
            println!("wrote {dir}/sweep_k.csv");
        }
        Command::Check => {
            let report = commands::cmd_check(&loaded)?;
            for p in &report.properties {
                println!(
                    "{} {}: {}",
                    if p.passed { "ok  " } else { "FAIL" },
                    p.name,
                    p.detail
                );
            }
            report.into_result()?;
        }
        Command::Refine => {
            let r = commands::cmd_refine(&loaded)?;
            println!(
                "differences {:?}, cauchy = {}; wrote {dir}/refine.csv",
                r.differences, r.cauchy
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let start = Instant::now();
    let result = run(Cli::parse());
    eprintln!("wall time {:.2?}", start.elapsed());
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
