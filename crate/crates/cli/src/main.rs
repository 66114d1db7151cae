//! Experiment harness for collaborative knowledge editing on synthetic
//! associative-memory layers.
//!
//! Every command writes `<out-dir>/<command>/results.csv` plus a
//! `summary.json` echoing the effective configuration, and is bit-for-bit
//! reproducible from that configuration and seed. Exit codes: 0 success,
//! 2 validation failure, 3 numerical failure.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use collabedit_core::config::RunConfig;

#[derive(Parser)]
#[command(name = "collabedit", version, about = "Collaborative knowledge editing experiments")]
struct Cli {
    /// JSON run configuration; omitted fields use built-in defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed (overrides the configuration file)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Gap curves: merge strategies vs the joint edit across edit counts
    Gate {
        /// Total edit counts, comma separated
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        /// Number of evaluation seeds per size
        #[arg(long, default_value_t = 5)]
        eval_seeds: usize,
    },
    /// One-round strategy comparison with the full metric family
    MergeBench,
    /// Repeated-edit residual trace, recurrence check, overlap detector
    Overlap {
        #[arg(long, default_value_t = 30)]
        repetitions: usize,
        /// Number of requests in the repeated batch
        #[arg(long, default_value_t = 1)]
        batch: usize,
    },
    /// Conflict study: inject rivals, merge, detect, resolve, report
    Conflict {
        /// Number of injected conflict groups
        #[arg(long, default_value_t = 200)]
        groups: usize,
    },
    /// Forgetting study: frozen vs dynamic covariance over many rounds
    Forgetting {
        #[arg(long, default_value_t = 50)]
        rounds: usize,
        #[arg(long, default_value_t = 20)]
        per_round: usize,
        /// Old requests whose quality is tracked
        #[arg(long, default_value_t = 20)]
        n_old: usize,
        /// Paired seeds to run
        #[arg(long, default_value_t = 5)]
        eval_seeds: usize,
    },
    /// Gram identity check and key-ambiguity sweep
    Privacy {
        /// Key-column counts for the sweep, comma separated
        #[arg(long, value_delimiter = ',')]
        key_counts: Option<Vec<usize>>,
        /// Confusion seeds per shape
        #[arg(long, default_value_t = 100)]
        sweep_seeds: usize,
    },
    /// Encode, decode, or inspect binary edit packets
    Packet {
        #[command(subcommand)]
        action: commands::packet::PacketAction,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gate { .. } => "gate",
            Command::MergeBench => "merge-bench",
            Command::Overlap { .. } => "overlap",
            Command::Conflict { .. } => "conflict",
            Command::Forgetting { .. } => "forgetting",
            Command::Privacy { .. } => "privacy",
            Command::Packet { .. } => "packet",
        }
    }

    /// Desk-scale defaults applied when no configuration file is given.
    /// The large-model weighting makes single edits nearly invisible at
    /// these dimensions, so study commands scale it down and the conflict
    /// and forgetting studies run in the memorization regime.
    fn default_config(&self) -> RunConfig {
        let base = RunConfig::default();
        match self {
            Command::Gate { .. } | Command::MergeBench | Command::Overlap { .. } => RunConfig {
                mu: 1.5e2,
                ..base
            },
            Command::Conflict { .. } | Command::Forgetting { .. } => RunConfig {
                mu: 1.5e2,
                n_init: 64,
                ..base
            },
            Command::Privacy { .. } | Command::Packet { .. } => base,
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                anyhow::anyhow!(ConfigError(format!("cannot read {}: {e}", path.display())))
            })?;
            serde_json::from_str(&text).map_err(|e| {
                anyhow::anyhow!(ConfigError(format!("cannot parse {}: {e}", path.display())))
            })?
        }
        None => cli.command.default_config(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()
        .map_err(|e| anyhow::anyhow!(ConfigError(e.to_string())))?;
    Ok(cfg)
}

/// Marker for failures that should exit with code 2.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    if let Some(core) = err.downcast_ref::<collabedit_core::Error>() {
        if core.is_numerical() {
            return 3;
        }
        if matches!(
            core,
            collabedit_core::Error::InvalidConfig(_) | collabedit_core::Error::Wire(_)
        ) {
            return 2;
        }
        return 3;
    }
    if err.downcast_ref::<collabedit_core::wire::WireError>().is_some() {
        return 2;
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli)?;
    let out = output::CommandOutput::new(&cli.out_dir, cli.command.name())?;
    match &cli.command {
        Command::Gate { sizes, eval_seeds } => {
            commands::gate::run(&cfg, sizes.clone(), *eval_seeds, &out)
        }
        Command::MergeBench => commands::merge_bench::run(&cfg, &out),
        Command::Overlap { repetitions, batch } => {
            commands::overlap::run(&cfg, *repetitions, *batch, &out)
        }
        Command::Conflict { groups } => commands::conflict::run(&cfg, *groups, &out),
        Command::Forgetting {
            rounds,
            per_round,
            n_old,
            eval_seeds,
        } => commands::forgetting::run(&cfg, *rounds, *per_round, *n_old, *eval_seeds, &out),
        Command::Privacy {
            key_counts,
            sweep_seeds,
        } => commands::privacy::run(&cfg, key_counts.clone(), *sweep_seeds, &out),
        Command::Packet { action } => commands::packet::run(&cfg, action, &out),
    }
}
