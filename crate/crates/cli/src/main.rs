//! `dcl`: runs the simulators, training, evaluation, bound checks and the
//! reproduction pipelines from JSON configs.
//!
//! Exit codes: 0 ok, 1 usage error, 2 config error, 3 numeric failure,
//! 4 bound check failed (`verify-bounds`), 5 missing input or i/o error.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use dcl_core::experiments::{BoundSweepConfig, CifarAnalogConfig, CrossModalConfig};

use crate::commands::Outcome;
use crate::config::{load, parse_override};
use crate::error::{CliError, Result};

#[derive(Parser, Debug)]
#[command(name = "dcl", version, about = "Debiased contrastive learning testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config file.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Output directory. Defaults to $DCL_OUT_ROOT/<command>/<config hash>.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override a config field, e.g. `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a dataset and its PLL table.
    Simulate {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train an encoder; writes a checkpoint and the loss trace.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Randomized check of the finite-sample gap bound.
    VerifyBounds {
        #[arg(long)]
        cases: Option<usize>,
    },
    /// Grid over objective, eta provider, r, LM a/k and thresholds.
    Sweep,
    /// Reproduction pipelines.
    Repro {
        #[command(subcommand)]
        which: Repro,
    },
}

#[derive(Subcommand, Debug)]
enum Repro {
    /// Four variants across the r grid, probed at each label fraction.
    CifarAnalog {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Constant-eta sweep against the LM provider on the long-tailed toy.
    CrossModal {
        #[arg(long)]
        epochs: Option<usize>,
    },
}

fn overrides(cli: &Cli, typed: Vec<(&str, Option<Value>)>) -> Result<Vec<(String, Value)>> {
    let mut out: Vec<(String, Value)> = typed
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
        .collect();
    for s in &cli.overrides {
        out.push(parse_override(s)?);
    }
    Ok(out)
}

fn run(cli: &Cli) -> Result<Outcome> {
    let cfg_path = cli.config.as_deref();
    let out = cli.out.as_deref();
    let seed = cli.seed.map(|s| json!(s));
    let seed_list = cli.seed.map(|s| json!([s]));
    match &cli.command {
        Command::Simulate { n } => {
            let ov = overrides(cli, vec![("seed", seed), ("n", n.map(|v| json!(v)))])?;
            commands::simulate(&load(cfg_path, None, &ov)?, out)
        }
        Command::Train { epochs } => {
            let ov = overrides(cli, vec![("train.seed", seed), ("train.epochs", epochs.map(|v| json!(v)))])?;
            commands::train_run(&load(cfg_path, None, &ov)?, out)
        }
        Command::Eval { checkpoint } => {
            let ov = overrides(
                cli,
                vec![("seed", seed), ("checkpoint", checkpoint.as_ref().map(|p| json!(p)))],
            )?;
            commands::eval(&load(cfg_path, None, &ov)?, out)
        }
        Command::VerifyBounds { cases } => {
            let ov = overrides(cli, vec![("seed", seed), ("cases", cases.map(|v| json!(v)))])?;
            let cfg: BoundSweepConfig = load(cfg_path, Some(BoundSweepConfig::default()), &ov)?;
            let (outcome, failed) = commands::verify_bounds(&cfg, out)?;
            report(&outcome);
            if failed > 0 {
                return Err(CliError::Acceptance(format!(
                    "{failed} case(s) violate the bound; see {}",
                    outcome.dir.join("bounds.csv").display()
                )));
            }
            Ok(outcome)
        }
        Command::Sweep => {
            let ov = overrides(cli, vec![("seeds", seed_list)])?;
            commands::sweep(&load(cfg_path, None, &ov)?, out)
        }
        Command::Repro { which } => match which {
            Repro::CifarAnalog { epochs } => {
                let ov = overrides(cli, vec![("seeds", seed_list), ("train.epochs", epochs.map(|v| json!(v)))])?;
                let cfg: CifarAnalogConfig = load(cfg_path, Some(CifarAnalogConfig::default()), &ov)?;
                commands::repro_cifar_analog(&cfg, out)
            }
            Repro::CrossModal { epochs } => {
                let ov = overrides(cli, vec![("seeds", seed_list), ("train.epochs", epochs.map(|v| json!(v)))])?;
                let cfg: CrossModalConfig = load(cfg_path, Some(CrossModalConfig::default()), &ov)?;
                commands::repro_cross_modal_run(&cfg, out)
            }
        },
    }
}

fn report(o: &Outcome) {
    for line in &o.summary {
        println!("{line}");
    }
    println!("config hash {}", o.manifest.config_hash);
    println!("outputs in {}", display(&o.dir));
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(outcome) => {
            if !matches!(cli.command, Command::VerifyBounds { .. }) {
                report(&outcome);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
