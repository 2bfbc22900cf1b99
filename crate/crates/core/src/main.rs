use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::LazyLock;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use stitch3d::config::RunConfig;
use stitch3d::pipeline;
use stitch3d::{Error, Result};

static KEYS: LazyLock<String> =
    LazyLock::new(|| format!("Config keys (dotted path = default):\n{}", RunConfig::key_reference()));

/// Synthetic multi-view world, latent stitching of a feedforward 3D network
/// onto an autoencoder latent, and reward alignment of a latent generator.
#[derive(Parser, Debug)]
#[command(name = "stitch3d", version, after_long_help = KEYS.as_str())]
struct Cli {
    /// JSON config file; absent keys take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one key, e.g. `--set align.steps=50`. Repeatable; applied
    /// after `--config`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Shorthand for `--set paths.workdir=DIR`.
    #[arg(long, global = true, value_name = "DIR")]
    workdir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Copy)]
struct Resume {
    /// Continue from the existing checkpoint and its optimizer step counter.
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the training and held-out scene sets.
    #[command(after_long_help = KEYS.as_str())]
    GenData,
    /// Train the per-frame autoencoder and fit latent statistics.
    #[command(after_long_help = KEYS.as_str())]
    TrainVae(Resume),
    /// Train the feedforward 3D network on ground-truth pointmaps.
    #[command(name = "train-3d", after_long_help = KEYS.as_str())]
    Train3d(Resume),
    /// Train and freeze the class critic.
    #[command(after_long_help = KEYS.as_str())]
    TrainCritic,
    /// Train the latent flow generator.
    #[command(after_long_help = KEYS.as_str())]
    TrainGen(Resume),
    /// Fit the closed-form stitch at every candidate layer and select k*.
    #[command(after_long_help = KEYS.as_str())]
    Scan,
    /// Assemble the stitched model at k* and fine-tune it against the 3D network.
    #[command(after_long_help = KEYS.as_str())]
    StitchFinetune,
    /// Reward-align the generator through the stitched 3D model.
    #[command(after_long_help = KEYS.as_str())]
    Align(Resume),
    /// Latent-noise robustness of the stitched versus decode-then-3D path.
    #[command(after_long_help = KEYS.as_str())]
    EvalRobustness,
    /// Per-layer stitching study relating fit error to stitched accuracy.
    #[command(after_long_help = KEYS.as_str())]
    EvalScan,
    /// Print the resolved configuration as JSON.
    #[command(after_long_help = KEYS.as_str())]
    Config,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainVae(_) => "train-vae",
            Command::Train3d(_) => "train-3d",
            Command::TrainCritic => "train-critic",
            Command::TrainGen(_) => "train-gen",
            Command::Scan => "scan",
            Command::StitchFinetune => "stitch-finetune",
            Command::Align(_) => "align",
            Command::EvalRobustness => "eval-robustness",
            Command::EvalScan => "eval-scan",
            Command::Config => "config",
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for s in &cli.set {
        cfg.set(s)?;
    }
    if let Some(dir) = &cli.workdir {
        cfg.paths.workdir = dir.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<Vec<String>> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::GenData => pipeline::gen_data(&cfg),
        Command::TrainVae(r) => pipeline::train_vae(&cfg, r.resume),
        Command::Train3d(r) => pipeline::train_3d(&cfg, r.resume),
        Command::TrainCritic => pipeline::train_critic_stage(&cfg),
        Command::TrainGen(r) => pipeline::train_gen(&cfg, r.resume),
        Command::Scan => pipeline::scan_stage(&cfg),
        Command::StitchFinetune => pipeline::stitch_finetune(&cfg),
        Command::Align(r) => pipeline::align_stage(&cfg, r.resume).map(|(s, _)| s),
        Command::EvalRobustness => pipeline::eval_robustness(&cfg).map(|(s, _)| s),
        Command::EvalScan => pipeline::eval_scan(&cfg).map(|(s, _)| s),
        Command::Config => Ok(vec![cfg.to_json().trim_end().to_string()]),
    }
}

fn one_line(e: &Error) -> String {
    e.to_string().replace('\n', " ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind::{DisplayHelp, DisplayVersion};
            if matches!(e.kind(), DisplayHelp | DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!(
                "error: kind=config msg={}",
                e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ")
            );
            return ExitCode::from(2);
        }
    };
    let start = Instant::now();
    match run(&cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            if !matches!(cli.command, Command::Config) {
                eprintln!("[{}] done in {:.1}s", cli.command.name(), start.elapsed().as_secs_f64());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: kind={} msg={}", e.kind(), one_line(&e));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
