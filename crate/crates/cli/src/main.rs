use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use singleens_cli::config::load_config;
use singleens_cli::{
    cmd_ablate, cmd_evaluate, cmd_report, cmd_sweep_k, cmd_train, error_kind, RunOptions, MANIFEST_FILE,
};

#[derive(Parser)]
#[command(
    name = "singleens",
    version,
    about = "Single-model ensembles of a Transformer encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment file (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Seeds to run, replacing the config's list (repeatable or comma separated)
    #[arg(long = "seed", alias = "seeds", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    /// Concurrent training runs
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

impl RunArgs {
    fn options(&self) -> RunOptions {
        RunOptions {
            out_dir: self.out_dir.clone(),
            workers: self.workers,
            seeds: (!self.seeds.is_empty()).then(|| self.seeds.clone()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured mode for every seed
    Train(RunArgs),
    /// Score checkpoints (all members of one ensemble) on a data file
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Data file; the config's test file by default
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Distinct-vector ablations and placement arms on shared seeds
    Ablate(RunArgs),
    /// Metric against the number of models
    SweepK {
        #[command(flatten)]
        run: RunArgs,
        /// K values, replacing the config's `[sweep] ks`
        #[arg(long, value_delimiter = ',')]
        ks: Vec<usize>,
    },
    /// Seed-aggregated tables from a manifest
    Report {
        /// Manifest file; `<out-dir>/manifest.json` by default
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let entries = cmd_train(&load_config(&a.config)?, &a.options())?;
            println!("{}", serde_json::to_string_pretty(&entries)?);
        }
        Command::Evaluate {
            config,
            checkpoints,
            data,
        } => {
            let ev = cmd_evaluate(&load_config(&config)?, &checkpoints, data.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&ev)?);
        }
        Command::Ablate(a) => {
            let report = cmd_ablate(&load_config(&a.config)?, &a.options())?;
            print!("{}", singleens_cli::report::render_ablation(&report));
        }
        Command::SweepK { run, ks } => {
            let cfg = load_config(&run.config)?;
            let ks = if ks.is_empty() { cfg.sweep.ks.clone() } else { ks };
            let sweep = cmd_sweep_k(&cfg, &ks, &run.options())?;
            print!("{}", sweep.to_csv()?);
        }
        Command::Report { manifest, out_dir } => {
            let manifest = manifest.unwrap_or_else(|| out_dir.join(MANIFEST_FILE));
            let report = cmd_report(&manifest, &out_dir)?;
            print!("{}", singleens_cli::report::render_markdown(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("singleens_cli=info,singleens=warn"))
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::json!({
                "error": error_kind(&e),
                "message": format!("{e:#}"),
            });
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}
