//! Command-line driver for the experiment pipeline.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, ValueEnum};
use memstream::experiment::{load_config, run_stage, Stage};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    GenData,
    PretrainCodec,
    Train,
    Eval,
    Report,
    All,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::GenData => Stage::GenData,
            StageArg::PretrainCodec => Stage::PretrainCodec,
            StageArg::Train => Stage::Train,
            StageArg::Eval => Stage::Eval,
            StageArg::Report => Stage::Report,
            StageArg::All => Stage::All,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "memstream", version, about = "Memory-augmented world model experiments")]
struct Cli {
    /// Pipeline stage to run.
    #[arg(value_enum)]
    stage: StageArg,
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model initialization and training-order seed.
    #[arg(long)]
    seed: Option<u64>,
    /// desk, paper or tiny.
    #[arg(long)]
    profile: Option<String>,
    /// none, cache, ssm or titans.
    #[arg(long)]
    encoder: Option<String>,
    /// none, prepend, additive, xattn, adanorm or lora.
    #[arg(long)]
    injector: Option<String>,
    /// Evaluate this single horizon; it also becomes the report horizon.
    #[arg(long)]
    horizon: Option<usize>,
    /// Output root; defaults to $MEMSTREAM_OUT, then the config value.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for independent configurations and episodes.
    #[arg(long)]
    parallel: Option<usize>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>> {
    let mut o: Vec<(String, String)> = Vec::new();
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            o.push((k.to_string(), v));
        }
    };
    push("profile", cli.profile.clone());
    push("seed", cli.seed.map(|s| s.to_string()));
    push("encoder", cli.encoder.clone());
    push("injector", cli.injector.clone());
    push("horizons", cli.horizon.map(|h| h.to_string()));
    push("report_horizon", cli.horizon.map(|h| h.to_string()));
    let out = cli.out.clone().or_else(|| std::env::var_os("MEMSTREAM_OUT").map(PathBuf::from));
    push("out", out.map(|p| p.display().to_string()));
    push("parallel", cli.parallel.map(|n| n.to_string()));
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        o.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(o)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = load_config(cli.config.as_deref(), &overrides(&cli)?)?;
    println!("{}", cfg.to_text());
    run_stage(cli.stage.into(), &cfg).with_context(|| format!("stage {}", Stage::from(cli.stage).name()))?;
    Ok(())
}
