use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use get_core::commands::{
    cmd_encode_bench, cmd_gen_events, cmd_gradcheck, cmd_infer, cmd_shapes, cmd_train_toy, write_json,
    BenchOptions, EncoderKind, GradScope, TrainOptions,
};
use get_core::events::{EventFormat, MotionModel};
use get_core::trainer::{Optimizer, TrainConfig};
use get_core::{GetConfig, Result};

#[derive(Parser)]
#[command(name = "get", version, about = "Group token encoding, verification and toy training for event streams")]
struct Cli {
    /// Model config as key=value lines; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Where to write the JSON (or CSV/event) output.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time one encoder on synthetic events.
    EncodeBench {
        #[arg(long, default_value = "group_token")]
        encoder: EncoderKind,
        #[arg(long, default_value_t = 1_000_000)]
        events: usize,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, default_value = "uniform_noise")]
        motion: MotionModel,
        /// Time span of the synthetic stream in microseconds.
        #[arg(long, default_value_t = 1_000_000)]
        duration: u64,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "ops")]
        scope: GradScope,
    },
    /// Per-stage grid, groups and channels of a config.
    Shapes,
    /// Train on the two-class synthetic set.
    TrainToy {
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
        #[arg(long, default_value = "adam")]
        optimizer: Optimizer,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Classify an event file with a checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        events: PathBuf,
        #[arg(long, default_value = "binary")]
        format: EventFormat,
    },
    /// Write a synthetic event file to --out.
    GenEvents {
        #[arg(long, default_value_t = 10_000)]
        events: usize,
        #[arg(long, default_value = "moving_bar")]
        motion: MotionModel,
        #[arg(long, default_value = "binary")]
        format: EventFormat,
        #[arg(long, default_value_t = 1_000_000)]
        duration: u64,
    },
}

fn emit<T: Serialize + std::fmt::Display>(report: &T, out: Option<&PathBuf>) -> Result<()> {
    println!("{report}");
    if let Some(path) = out {
        write_json(path, report)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = match &cli.config {
        Some(path) => GetConfig::load(path)?,
        None => GetConfig::default(),
    };
    let out = cli.out.as_ref();
    match cli.command {
        Command::EncodeBench { encoder, events, runs, motion, duration } => {
            let opts = BenchOptions {
                encoder,
                events,
                threads: cli.threads,
                runs,
                seed: cli.seed,
                motion,
                config: cfg,
                duration,
            };
            emit(&cmd_encode_bench(&opts)?, out)?;
        }
        Command::Gradcheck { scope } => {
            let report = cmd_gradcheck(scope, cli.seed)?;
            emit(&report, out)?;
            return Ok(report.passed);
        }
        Command::Shapes => emit(&cmd_shapes(&cfg)?, out)?,
        Command::TrainToy { samples, steps, lr, optimizer, batch_size, checkpoint, loss_csv } => {
            let cfg = if cli.config.is_some() { cfg } else { GetConfig { seed: cli.seed, ..GetConfig::micro() } };
            let tcfg = TrainConfig { optimizer, lr, steps, batch_size, seed: cli.seed, frozen: Vec::new() };
            let opts = TrainOptions { samples, data_seed: cli.seed, checkpoint, loss_csv };
            let (report, _) = cmd_train_toy(&cfg, &tcfg, &opts)?;
            emit(&report, out)?;
        }
        Command::Infer { checkpoint, events, format } => {
            let expected = cli.config.as_ref().map(|_| &cfg);
            emit(&cmd_infer(checkpoint, events, format, expected)?, out)?;
        }
        Command::GenEvents { events, motion, format, duration } => {
            let path = out.ok_or_else(|| get_core::Error::Config("gen-events needs --out".into()))?;
            let sensor = (cfg.sensor_width, cfg.sensor_height);
            let stream = cmd_gen_events(path, format, cli.seed, events, sensor, duration, motion)?;
            println!("wrote {} events ({}x{}) to {}", stream.len(), sensor.0, sensor.1, path.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
