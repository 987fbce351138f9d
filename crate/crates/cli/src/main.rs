use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use placefl_core::config::ExperimentConfig;
use placefl_core::Error;

mod commands;

#[derive(Debug, Parser)]
#[command(name = "placefl", version, about = "Federated contrastive training simulator for place recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources shared by every command. Precedence: flag, then
/// config file, then built-in default.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML experiment configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,

    /// Override any config key, e.g. `--set federation.rounds=30`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Cap on concurrently training clients.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic world and write its manifest.
    Generate {
        /// Manifest path; defaults to `<output_dir>/manifest.csv`.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// World seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Split a manifest into clients and print the partition statistics.
    Partition {
        /// Manifest to split; the configured world is generated when absent.
        #[arg(short, long)]
        manifest: Option<PathBuf>,
        /// Partition path; defaults to `<output_dir>/partition.jsonl`.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Split kind: proximity, clustering or random.
        #[arg(long)]
        split: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train every configured variant and seed.
    Train {
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Comma-separated run seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        rounds: Option<usize>,
        /// centralized, federated or hierarchical.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        partition: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Recall of a checkpoint on a manifest or on a partition's clients.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Evaluate on the pooled samples of these clients only.
        #[arg(long)]
        partition: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        /// Geographic radius of a correct match in meters.
        #[arg(long)]
        radius: Option<f64>,
        /// Write the rank of each query's first correct match here (JSON lines).
        #[arg(long)]
        outcomes: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Summary tables from one or more metrics files.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        /// Also write one CSV per table into this directory.
        #[arg(long)]
        csv_dir: Option<PathBuf>,
    },
}

impl ConfigArgs {
    /// Loads the configuration and applies `(key, value)` flag overrides
    /// followed by the generic `--set` ones.
    fn resolve(&self, flags: &[(&str, Option<String>)]) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        let workers = self.workers.map(|w| w.to_string());
        for (key, value) in flags.iter().chain(&[("workers", workers)]) {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        for o in &self.overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }
}

fn quoted(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| format!("{:?}", p.display().to_string()))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate { out, seed, cfg } => {
            let config = cfg.resolve(&[("world.seed", seed.map(|s| s.to_string()))])?;
            commands::generate(&config, out)
        }
        Command::Partition {
            manifest,
            out,
            split,
            cfg,
        } => {
            let config = cfg.resolve(&[("manifest", quoted(&manifest)), ("partition.kind", split)])?;
            commands::partition(&config, out)
        }
        Command::Train {
            output_dir,
            seeds,
            rounds,
            mode,
            manifest,
            partition,
            cfg,
        } => {
            let seeds = seeds.map(|s| format!("{s:?}"));
            let config = cfg.resolve(&[
                ("output_dir", quoted(&output_dir)),
                ("seeds", seeds),
                ("federation.rounds", rounds.map(|r| r.to_string())),
                ("mode", mode),
                ("manifest", quoted(&manifest)),
                ("partition_file", quoted(&partition)),
            ])?;
            commands::train(&config)
        }
        Command::Eval {
            checkpoint,
            manifest,
            partition,
            ks,
            radius,
            outcomes,
            cfg,
        } => {
            let config = cfg.resolve(&[
                ("eval.ks", ks.map(|k| format!("{k:?}"))),
                ("eval.positive_radius", radius.map(|r| format!("{r:?}"))),
            ])?;
            commands::eval(&config, &checkpoint, &manifest, partition.as_deref(), outcomes.as_deref())
        }
        Command::Report { metrics, csv_dir } => commands::report(&metrics, csv_dir.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 1 } else { 2 })
        }
    }
}
