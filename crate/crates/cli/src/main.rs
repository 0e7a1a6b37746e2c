use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde_json::Value;

use lte_core::experiments::{cmd_eval, cmd_frozen, cmd_run, parse_config};
use lte_core::genome::parse_genotype;
use lte_core::{Arch, CullingPolicy, Error, ExperimentConfig, MetricsRecord, Profile};

/// Populations of emergent-language agents with cultural and architectural
/// evolution.
#[derive(Parser, Debug)]
#[command(name = "lte", version)]
struct Cli {
    /// Default values to start from.
    #[arg(long, global = true, value_parser = parse_profile)]
    profile: Option<Profile>,

    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct ConfigArgs {
    /// JSON config file; keys override the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override any config key, e.g. `--set eval_rounds=256`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_assignment)]
    set: Vec<(String, Value)>,

    /// Seeds to run; replaces the config's seed list.
    #[arg(long = "seed")]
    seeds: Vec<u64>,

    #[arg(long)]
    iterations: Option<usize>,

    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train populations and log metrics.
    Run {
        #[command(flatten)]
        config: ConfigArgs,

        /// Culling setups to run; replaces the config's setup list.
        #[arg(long = "setup", value_parser = parse_setup)]
        setups: Vec<CullingPolicy>,
    },
    /// Train fresh receivers against a frozen sender.
    Frozen {
        #[command(flatten)]
        config: ConfigArgs,

        /// Sender checkpoint to freeze.
        #[arg(long)]
        sender: PathBuf,

        /// `lstm` or a genotype JSON file.
        #[arg(long)]
        receiver_arch: String,

        #[arg(long)]
        repetitions: Option<usize>,
    },
    /// Recompute the metrics of a checkpoint snapshot directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_setup(s: &str) -> Result<CullingPolicy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_assignment(s: &str) -> Result<(String, Value), String> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn resolve(profile: Option<Profile>, args: &ConfigArgs, extra: Vec<(String, Value)>) -> anyhow::Result<ExperimentConfig> {
    let mut overrides = args.set.clone();
    if !args.seeds.is_empty() {
        overrides.push(("seeds".into(), serde_json::json!(args.seeds)));
    }
    if let Some(i) = args.iterations {
        overrides.push(("iterations".into(), serde_json::json!(i)));
    }
    overrides.extend(extra);
    Ok(parse_config(args.config.as_deref(), profile, &overrides)?)
}

fn receiver_arch(spec: &str) -> anyhow::Result<Arch> {
    if spec == "lstm" {
        return Ok(Arch::Lstm);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()).into());
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {spec}"))?;
    Ok(Arch::Genotype(parse_genotype(&text)?))
}

fn csv_line(r: &MetricsRecord) -> String {
    let mut fields = vec![r.iteration.to_string(), r.setup.clone(), r.seed.to_string()];
    fields.extend(r.values().iter().map(|v| format!("{v:.16e}")));
    fields.join(",")
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config, setups } => {
            let extra = if setups.is_empty() {
                vec![]
            } else {
                vec![("setups".into(), serde_json::to_value(&setups)?)]
            };
            let cfg = resolve(cli.profile, &config, extra)?;
            let records = cmd_run(&cfg, &config.out)?;
            eprintln!(
                "wrote {} snapshot rows to {}",
                records.len(),
                config.out.join("metrics.csv").display()
            );
        }
        Command::Frozen {
            config,
            sender,
            receiver_arch: arch,
            repetitions,
        } => {
            let extra = repetitions
                .map(|r| vec![("frozen_repetitions".to_string(), serde_json::json!(r))])
                .unwrap_or_default();
            let cfg = resolve(cli.profile, &config, extra)?;
            let arch = receiver_arch(&arch)?;
            let outcome = cmd_frozen(&cfg, &sender, arch, &config.out)?;
            for arm in &outcome.arms {
                println!(
                    "{}: median batches to {:.0}% = {}",
                    arm.name,
                    cfg.frozen_target * 100.0,
                    arm.median_batches(cfg.frozen_batches)
                );
            }
        }
        Command::Eval { ckpt } => {
            let report = cmd_eval(&ckpt)?;
            println!("{}", MetricsRecord::HEADER.join(","));
            println!("{}", csv_line(&report.recomputed));
            eprintln!("max abs difference from logged row: {:e}", report.max_abs_diff);
            if report.max_abs_diff > 1e-9 {
                anyhow::bail!("recomputed metrics differ from the logged row");
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config { .. } | Error::Parse { .. } | Error::Validation(_)) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("LTE_THREADS").ok().and_then(|v| v.parse().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: LTE_THREADS ignored: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
