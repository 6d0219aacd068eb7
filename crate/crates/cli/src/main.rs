//! `dcl`: experiment harness for decentralized collaborative learning.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;

use crate::config::{AggbenchConfig, LearnConfig, PrivacyConfig, ScalingConfig, SynthConfig};
use crate::error::CliResult;

#[derive(Parser)]
#[command(name = "dcl", version, about = "Consensus, privacy and federated EM experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Flat TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Overrides the `seed` key of the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Consensus iteration counts against network size.
    Scaling(Common),
    /// Breach probability grids for collusion and eavesdropping.
    Privacy(Common),
    /// Message and iteration cost of plain, Shamir and chunked aggregation.
    Aggbench(Common),
    /// Federated EM on `agent_<id>.csv` files.
    Learn(Common),
    /// Synthetic per-agent mixture data.
    Synth(Common),
}

trait Seeded {
    fn set_seed(&mut self, seed: u64);
}

macro_rules! seeded {
    ($($t:ty),*) => {
        $(impl Seeded for $t {
            fn set_seed(&mut self, seed: u64) {
                self.seed = seed;
            }
        })*
    };
}

seeded!(ScalingConfig, PrivacyConfig, AggbenchConfig, LearnConfig, SynthConfig);

fn load<C: DeserializeOwned + Seeded>(common: &Common) -> CliResult<C> {
    let mut cfg: C = config::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    output::prepare_dir(&common.out)?;
    Ok(cfg)
}

fn dispatch(command: &Command) -> CliResult<Vec<PathBuf>> {
    match command {
        Command::Scaling(c) => commands::scaling::run(&load(c)?, &c.out),
        Command::Privacy(c) => commands::privacy::run(&load(c)?, &c.out),
        Command::Aggbench(c) => commands::aggbench::run(&load(c)?, &c.out),
        Command::Learn(c) => {
            let base = c.config.parent().unwrap_or(Path::new("."));
            commands::learn::run(&load(c)?, base, &c.out)
        }
        Command::Synth(c) => commands::synth::run(&load(c)?, &c.out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("dcl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
