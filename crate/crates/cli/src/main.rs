use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use soc_cli::commands::{self, Globals};
use soc_cli::config::RunConfig;
use soc_cli::CliError;

#[derive(Parser, Debug)]
#[command(name = "soc", version, about = "Structured occlusion coding pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Dump per-image diagnostics (mask iterations as PGM).
    #[arg(long, global = true)]
    debug: bool,
    /// Write per-stage timings to stats.csv.
    #[arg(long, global = true)]
    timing: bool,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate a synthetic corpus.
    Synth,
    /// Collect occlusion samples from the corpus `collect` split.
    Collect,
    /// Train occlusion dictionaries from collected samples.
    Train,
    /// Classify the corpus `test` split.
    Classify,
    /// ROC table of RDI rejection from a results CSV.
    Roc,
    /// Accuracy against occlusion dictionary size.
    Sweep,
}

fn run(cli: &Cli) -> Result<PathBuf, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.set("seed", &s.to_string())?;
    }
    let g = Globals {
        out: cli.out.clone(),
        debug: cli.debug,
        timing: cli.timing,
    };
    match cli.command {
        Command::Synth => commands::cmd_synth(&cfg, &g),
        Command::Collect => commands::cmd_collect(&cfg, &g),
        Command::Train => commands::cmd_train(&cfg, &g),
        Command::Classify => commands::cmd_classify(&cfg, &g),
        Command::Roc => commands::cmd_roc(&cfg, &g),
        Command::Sweep => commands::cmd_sweep(&cfg, &g),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(path) => {
            commands::announce(&path);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("soc: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
