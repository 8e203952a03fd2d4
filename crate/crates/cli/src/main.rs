mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gcprune::graph::groups::GroupId;
use gcprune::ToyArch;

use commands::{Classify, CmdResult};

/// Dependency-aware, performance-constrained channel pruning.
///
/// Log verbosity is read from GCPRUNE_LOG (error, warn, info, debug, trace).
#[derive(Parser)]
#[command(name = "gcprune", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set prune.alpha=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Cost report, group table and saliency CSV.
    Analyze(ConfigArgs),
    /// Layer order for each probe ratio as a CSV matrix.
    Sequence {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated probe ratios; defaults to `sequence.ratios`.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
    },
    /// Run the pruning loop; writes the pruned model, plan and summary.
    Prune {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate per-task losses once.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Evaluate this model instead of the configured one.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Comma-separated group ids to mask.
        #[arg(long, value_delimiter = ',')]
        mask: Vec<GroupId>,
    },
    /// Width and sensitivity tables from a plan.
    Report {
        #[arg(long)]
        plan: PathBuf,
        /// Output directory; defaults to the plan's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a toy model and optionally a synthetic dataset for it.
    Toy {
        #[arg(long, default_value = "toy_mt_a")]
        arch: ToyArch,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        data_seed: u64,
    },
}

fn run(cli: Cli) -> CmdResult {
    let load = |a: &ConfigArgs| config::load(&a.config, &a.overrides).usage();
    match cli.command {
        Cmd::Analyze(a) => commands::analyze(&load(&a)?),
        Cmd::Sequence { cfg, ratios } => commands::sequence(&load(&cfg)?, ratios),
        Cmd::Prune { cfg, resume } => commands::prune(&load(&cfg)?, resume.as_deref()),
        Cmd::Eval { cfg, model, mask } => commands::eval(&load(&cfg)?, model.as_deref(), &mask),
        Cmd::Report { plan, out } => {
            let out = out.unwrap_or_else(|| plan.parent().map(PathBuf::from).unwrap_or_default());
            commands::report(&plan, &out)
        }
        Cmd::Toy {
            arch,
            seed,
            out,
            dataset,
            samples,
            data_seed,
        } => commands::toy(arch, seed, &out, dataset.as_deref().map(|p| (p, samples, data_seed))),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GCPRUNE_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
