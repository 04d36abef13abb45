//! `hypercorr`: parameter tables, benchmarks, self-checks, toy training and
//! evaluation.
//!
//! Exit status is 0 when every check passes, 1 when a check fails and 2 on a
//! usage or I/O error.

mod commands;
mod config;
mod report;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Config;
use report::{Failure, Report};

#[derive(Debug, Parser)]
#[command(name = "hypercorr", version, about = "Hypercorrelation squeeze network toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Seed for every random draw (default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// key=value file supplying defaults for any option.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Write the key=value outcome report here.
    #[arg(long, global = true, value_name = "FILE")]
    report: Option<PathBuf>,
    /// Run every kernel on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-block parameter counts, diffed against the published tables.
    Params(commands::ParamsArgs),
    /// FLOPs and wall time of each 4D kernel variant.
    Bench(commands::BenchArgs),
    /// Finite-difference checks of every differentiable operation.
    Gradcheck,
    /// Overfit the toy model on one synthetic episode.
    TrainToy(commands::TrainArgs),
    /// mIoU and FB-IoU of an episode manifest.
    Eval(commands::EvalArgs),
    /// Center-pivot convolution against the dense oracle on random trials.
    VerifyDecomposition(commands::VerifyArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Params(_) => "params",
            Command::Bench(_) => "bench",
            Command::Gradcheck => "gradcheck",
            Command::TrainToy(_) => "train-toy",
            Command::Eval(_) => "eval",
            Command::VerifyDecomposition(_) => "verify-decomposition",
        }
    }
}

/// Settings every command sees after merging flags and the config file.
pub struct Context {
    pub seed: u64,
    pub config: Config,
}

fn run(cli: &Cli, report: &mut Report) -> Result<(), Failure> {
    let config = match &cli.global.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if config.switch(cli.global.sequential, "sequential")? {
        hypercorr::par::set_parallel(false);
    }
    let ctx = Context {
        seed: config.pick(cli.global.seed, "seed", 0)?,
        config,
    };
    report.value("seed", ctx.seed);
    match &cli.command {
        Command::Params(a) => commands::params(&ctx, a, report),
        Command::Bench(a) => commands::bench(&ctx, a, report),
        Command::Gradcheck => commands::gradcheck(&ctx, report),
        Command::TrainToy(a) => commands::train_toy(&ctx, a, report),
        Command::Eval(a) => commands::eval(&ctx, a, report),
        Command::VerifyDecomposition(a) => commands::verify_decomposition(&ctx, a, report),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut report = Report::new(cli.command.name());
    if let Err(f) = run(&cli, &mut report) {
        eprintln!("error: {}", f.message);
        report.fail_with(&f);
    }
    let code = report.exit_code();
    let text = report.to_kv();
    let path = cli.global.report.clone().or_else(|| {
        let c = cli.global.config.as_ref().and_then(|p| Config::load(p).ok())?;
        c.get::<PathBuf>("report").ok().flatten()
    });
    if let Some(p) = path {
        if let Err(e) = fs::write(&p, &text) {
            eprintln!("error: cannot write report {}: {e}", p.display());
            return ExitCode::from(report::EXIT_USAGE);
        }
    }
    if code != report::EXIT_PASS {
        eprint!("{text}");
    }
    ExitCode::from(code)
}
