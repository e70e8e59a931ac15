use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lsopt_core::{run, ExperimentError, ExperimentSpec, RefinementMode, RunOptions, SolverError};

#[derive(Parser, Debug)]
#[command(name = "lsopt", version, about = "Least-squares FEM for optimal control: convergence experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment and write its convergence data file.
    Run(RunArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// poisson-unconstrained, poisson-constrained, lshape, stokes or heat
    experiment: String,
    /// Cells per unit length of the initial mesh
    #[arg(long)]
    n0: Option<usize>,
    /// Number of levels
    #[arg(long, conflicts_with = "max_dofs")]
    levels: Option<usize>,
    /// Stop after the first level with more unknowns than this
    #[arg(long)]
    max_dofs: Option<usize>,
    /// Dörfler marking parameter
    #[arg(long)]
    theta: Option<f64>,
    /// Weight of the least-squares terms in the coupled form
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_parser = ["uniform", "adaptive"])]
    mode: Option<String>,
    /// Data file (default: <experiment>.dat)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved parameters and exit
    #[arg(long)]
    print_config: bool,
}

fn options(args: &RunArgs) -> Result<RunOptions, ExperimentError> {
    Ok(RunOptions {
        n0: args.n0,
        levels: args.levels,
        max_dofs: args.max_dofs,
        theta: args.theta,
        gamma: args.gamma,
        mode: args.mode.as_deref().map(str::parse::<RefinementMode>).transpose()?,
        out: Some(args.out.clone().unwrap_or_else(|| PathBuf::from(format!("{}.dat", args.experiment)))),
    })
}

fn usage_error(e: &ExperimentError) -> bool {
    matches!(
        e,
        ExperimentError::UnknownExperiment(_) | ExperimentError::Config(_) | ExperimentError::Solver(SolverError::Config(_))
    )
}

fn execute(args: &RunArgs) -> Result<(), ExperimentError> {
    let opts = options(args)?;
    if args.print_config {
        let mut spec = ExperimentSpec::by_name(&args.experiment)?;
        spec.apply(&opts)?;
        print!("{}", spec.describe());
        return Ok(());
    }
    let report = run(&args.experiment, &opts)?;
    println!("{:>6} {:>10} {:>12} {:>12} {:>12} {:>12} {:>5}", "level", "N", "estimator", "errState", "errAdjoint", "errU", "iter");
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4e}"));
    for r in &report.records {
        println!(
            "{:>6} {:>10} {:>12} {:>12} {:>12} {:>12} {:>5}",
            r.level,
            r.n_dofs,
            format!("{:.4e}", r.estimator),
            cell(r.err_state),
            cell(r.err_adjoint),
            cell(r.err_u),
            r.iterations.map_or_else(|| "-".to_string(), |k| k.to_string())
        );
    }
    println!();
    print!("{}", report.eoc_table());
    if let Some(out) = &opts.out {
        println!("data written to {}", out.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let Command::Run(args) = &cli.command;
    match execute(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            if usage_error(&e) {
                ExitCode::from(2)
            } else {
                log::debug!("solver failure: {e:?}");
                ExitCode::from(1)
            }
        }
    }
}
