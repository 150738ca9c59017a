//! Command line front end: one config file, one subcommand, one output
//! directory per process. Exit codes: 0 success, 2 config error, 3 the
//! configured pass diverged or is not a contraction, 4 I/O failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fredino::error::Error;
use fredino::run::{
    cmd_contraction, cmd_evaluate, cmd_generate, cmd_solve_pde, cmd_train, RunContext,
};

#[derive(Parser)]
#[command(name = "fredino", version, about = "Fredholm fixed-point networks: datasets, training, diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the dataset described by the config and save it under --out.
    Generate(CommonArgs),
    /// Fit the configured surrogate, generating the dataset first if absent.
    Train(CommonArgs),
    /// Score the trained model on held-out functions from the config.
    Evaluate(CommonArgs),
    /// Diagnose the configured fixed-point pass; nonzero exit when it is
    /// not a contraction.
    Contraction(CommonArgs),
    /// Solve one Dirichlet instance through the boundary-integral pass.
    SolvePde(CommonArgs),
}

impl Command {
    fn args(&self) -> &CommonArgs {
        match self {
            Command::Generate(a)
            | Command::Train(a)
            | Command::Evaluate(a)
            | Command::Contraction(a)
            | Command::SolvePde(a) => a,
        }
    }
}

#[derive(Args)]
struct CommonArgs {
    /// Run config JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to runs/<name>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the dataset generation seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Cap the number of worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Run the config's full-scale experiment block instead of the
    /// desk-scale one.
    #[arg(long)]
    paper_scale: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let args = cli.command.args();

    if let Some(threads) = args.threads {
        if threads == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }

    match dispatch(&cli.command, args) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: &Command, args: &CommonArgs) -> Result<String, Error> {
    let ctx = RunContext::new(&args.config, args.out.clone(), args.paper_scale, args.seed)?;
    let out = ctx.out.display().to_string();
    Ok(match command {
        Command::Generate(_) => {
            let s = cmd_generate(&ctx)?;
            let mut line = format!(
                "generated {} samples on {} points -> {out}",
                s.n_samples, s.grid_points
            );
            if let Some(lambda) = s.calibrated_lambda {
                line.push_str(&format!(" (calibrated lambda {lambda:.6e})"));
            }
            if let Some(r) = s.max_residual {
                line.push_str(&format!(" (max residual {r:.2e})"));
            }
            line
        }
        Command::Train(_) => {
            let s = cmd_train(&ctx)?;
            format!(
                "trained {} epochs, final loss {:.4e}, {:.1}s, {} divergence retries -> {out}",
                s.epochs_run, s.final_loss, s.wall_time_s, s.diverged_retries
            )
        }
        Command::Evaluate(_) => {
            let s = cmd_evaluate(&ctx)?;
            let mut line = format!(
                "evaluated {} held-out functions, median rel L2 {:.4e}",
                s.n_test, s.median_rel_l2
            );
            if let Some(solver) = s.solver_median_rel_l2 {
                line.push_str(&format!(" (solver {solver:.4e})"));
            }
            line.push_str(&format!(" -> {out}"));
            line
        }
        Command::Contraction(_) => {
            let s = cmd_contraction(&ctx)?;
            format!(
                "{} pass is a contraction: inf row sum {:.6}, spectral {:.6} -> {out}",
                s.source, s.inf_norm_w, s.spectral_norm_w
            )
        }
        Command::SolvePde(_) => {
            let s = cmd_solve_pde(&ctx)?;
            format!(
                "solved with {} in {} outer iterations (last delta {:.2e}) -> {out}",
                s.source, s.outer_iterations, s.final_delta
            )
        }
    })
}
