use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lookahead_cli::commands::{self, CliError, Command};
use lookahead_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "lookahead", version, about = "Joint causal / mask-predict captioning with confidence calibration")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable. Wins over the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus and vocabulary.
    GenData {
        #[arg(long)]
        force: bool,
    },
    /// Stage 1: joint training of both decoders.
    TrainJoint {
        #[arg(long)]
        resume: bool,
        /// Stop once this many updates are done (checkpoint kept).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Stage 2: confidence calibration from the stage-1 checkpoint.
    TrainCdc {
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Score a checkpoint on the configured split.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "eval")]
        tag: String,
    },
    /// Sweep lambda or epsilon; one isolated run per value.
    Sweep {
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
    },
    /// Calibrate with every mask strategy from the same checkpoint.
    AblateMasks,
    /// Histogram, position profile and interval table for prediction logs.
    Analyze {
        #[arg(long)]
        before: Option<PathBuf>,
        #[arg(long)]
        after: Option<PathBuf>,
    },
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::GenData { force } => Command::GenData { force },
            Cmd::TrainJoint { resume, stop_after } => Command::TrainJoint { resume, stop_after },
            Cmd::TrainCdc { resume, stop_after } => Command::TrainCdc { resume, stop_after },
            Cmd::Evaluate { checkpoint, tag } => Command::Evaluate { checkpoint, tag },
            Cmd::Sweep { param, values } => Command::Sweep { param, values },
            Cmd::AblateMasks => Command::AblateMasks,
            Cmd::Analyze { before, after } => Command::Analyze { before, after },
        }
    }
}

fn run(cli: Cli) -> Result<Vec<String>, CliError> {
    let overrides = cli
        .set
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides)?;
    commands::run(&cfg, &cli.cmd.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(if matches!(e, CliError::Usage(_)) { 2 } else { 1 })
        }
    }
}
