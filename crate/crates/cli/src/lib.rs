//! Command-line front end: `strata <command> [--config FILE] [--set KEY=VALUE]... [--seed N] [--out DIR]`.
//!
//! Exit codes: 0 on success, 1 when arguments or configuration are invalid
//! (nothing is written), 2 when a run fails (the failing stage is named).

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use strata::pipeline::{execute, keys_help, Command, ExperimentConfig};
use strata::Error;

pub const OUT_ENV: &str = "STRATA_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "strata", version, about = "Image-prompted diffusion sandbox")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Train the denoiser on the synthetic dataset.
    Train(Common),
    /// DDIM-invert the prompt images and save their latent chains.
    Invert(Common),
    /// Generate images from the prompts and score them.
    Generate(Common),
    /// Sweep prompt weights, guidance scales or fusion schedules.
    Ablate(Common),
    /// Attention-mass traces and the guidance-mode comparison.
    Analyze(Common),
    /// Write the synthetic dataset as pixmaps.
    MakeData(Common),
}

#[derive(Debug, Args)]
#[command(after_help = format!("Configuration keys:\n{}", keys_help()))]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, later values win.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for the command (train.seed, data.seed or run.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output root [default: $STRATA_OUT_DIR, then output.dir].
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Sub {
    fn split(self) -> (Command, Common) {
        match self {
            Sub::Train(c) => (Command::Train, c),
            Sub::Invert(c) => (Command::Invert, c),
            Sub::Generate(c) => (Command::Generate, c),
            Sub::Ablate(c) => (Command::Ablate, c),
            Sub::Analyze(c) => (Command::Analyze, c),
            Sub::MakeData(c) => (Command::MakeData, c),
        }
    }
}

fn seed_key(cmd: Command) -> &'static str {
    match cmd {
        Command::Train => "train.seed",
        Command::MakeData => "data.seed",
        _ => "run.seed",
    }
}

fn build_config(cmd: Command, c: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config {
                key: "--config".into(),
                message: format!("cannot read {}: {e}", path.display()),
            })?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.set(seed_key(cmd), &seed.to_string())?;
    }
    for s in &c.set {
        cfg.apply_assignment(s)?;
    }
    Ok(cfg)
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (cmd, common) = cli.command.split();
    let cfg = match build_config(cmd, &common) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let out = common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(cfg.get("output.dir")));
    match execute(cmd, &cfg, &out) {
        Ok(report) => {
            println!("{}", report.dir.display());
            0
        }
        Err(e @ Error::Config { .. }) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
