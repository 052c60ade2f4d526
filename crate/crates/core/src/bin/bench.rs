use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tmpd::bench::{self, Experiment, ExperimentConfig, RunOptions, WORKERS_ENV};

#[derive(Parser)]
#[command(name = "bench", version, about = "Synthetic posterior-sampling benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Gaussian-mixture sweep scored by sliced W1.
    Gmm(RunArgs),
    /// Matern random field curves scored by Gaussian W2.
    Grf(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = WORKERS_ENV)]
    workers: Option<usize>,
    /// Shrink every size so the run takes seconds.
    #[arg(long)]
    smoke: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (expected, args) = match &cli.command {
        Command::Gmm(a) => (Experiment::Gmm, a),
        Command::Grf(a) => (Experiment::Grf, a),
    };
    let mut cfg = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if cfg.experiment != expected {
        eprintln!("error: {} is a {} config, not {expected}", args.config.display(), cfg.experiment);
        return ExitCode::from(1);
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.smoke {
        cfg = cfg.smoke();
    }
    let opts = RunOptions { workers: args.workers.unwrap_or_else(bench::default_workers), artifacts: Some(args.out.clone()) };
    let result = bench::run(&cfg, &opts).and_then(|(report, outcome)| {
        bench::write_outputs(&report, &outcome, &args.out)?;
        Ok(report)
    });
    match result {
        Err(tmpd::Error::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Ok(report) => {
            let failed = report.failures();
            eprintln!("{} records written to {} ({failed} failed)", report.records.len(), args.out.display());
            if failed > 0 {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
    }
}
