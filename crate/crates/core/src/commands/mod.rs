//! The operations behind the `get` binary. Each returns a serialisable
//! report that also prints as a human-readable summary.

mod gradcheck;

pub use gradcheck::{
    check_block, check_model, check_model_config, check_ops, cmd_gradcheck, probe, probe_loss, GradScope,
    GradcheckReport, NamedCheck, BLOCK_TOL, POOLED_EPS, SMOOTH_EPS, MODEL_TOL, OP_EPS, OP_TOL, SHAPES_PER_OP,
};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::events::{generate_synthetic_stream, load_events, EventFormat, EventStream, MotionModel};
use crate::group_token::{encode_event_histogram, encode_group_tokens, encode_voxel_grid};
use crate::model::{classify, load_checkpoint, save_checkpoint, GetConfig};
use crate::trainer::{evaluate, toy_dataset, train_toy, write_loss_csv, TrainConfig, TrainOutcome};

/// Runs `f` on a dedicated pool of exactly `threads` workers.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    if threads == 0 {
        return Err(Error::Config("--threads must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Writes any report as pretty JSON.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    GroupToken,
    Histogram,
    Voxel,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 3] = [Self::GroupToken, Self::Histogram, Self::Voxel];

    pub fn name(self) -> &'static str {
        match self {
            Self::GroupToken => "group_token",
            Self::Histogram => "histogram",
            Self::Voxel => "voxel",
        }
    }

    /// Published conversion time for 10⁸ events, in seconds.
    pub fn reference_seconds_per_1e8(self) -> f64 {
        match self {
            Self::GroupToken => 0.052,
            Self::Histogram => 0.374,
            Self::Voxel => 0.390,
        }
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown encoder {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub encoder: EncoderKind,
    pub events: usize,
    pub threads: usize,
    pub runs: usize,
    pub seed: u64,
    pub motion: MotionModel,
    /// Sensor, K and P come from here.
    pub config: GetConfig,
    pub duration: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::GroupToken,
            events: 1_000_000,
            threads: 1,
            runs: 5,
            seed: 0,
            motion: MotionModel::UniformNoise,
            config: GetConfig::default(),
            duration: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Hardware {
    pub cpu: String,
    pub logical_cpus: usize,
    pub os: String,
    pub arch: String,
}

impl Hardware {
    pub fn detect() -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split_once(':'))
                    .map(|(_, v)| v.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        Self {
            cpu,
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub encoder: EncoderKind,
    pub events: usize,
    pub threads: usize,
    pub motion: String,
    pub run_seconds: Vec<f64>,
    pub median_seconds: f64,
    pub min_seconds: f64,
    /// `events / median_seconds`.
    pub events_per_second: f64,
    pub seconds_per_1e8: f64,
    pub reference_seconds_per_1e8: f64,
    pub comparison: String,
    pub hardware: Hardware,
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} on {} events ({}), {} thread(s), {} runs",
            self.encoder.name(),
            self.events,
            self.motion,
            self.threads,
            self.run_seconds.len()
        )?;
        writeln!(
            f,
            "  median {:.4} s  min {:.4} s  {:.3e} events/s",
            self.median_seconds, self.min_seconds, self.events_per_second
        )?;
        writeln!(f, "  {}", self.comparison)?;
        write!(f, "  hardware: {} ({} logical CPUs, {}/{})", self.hardware.cpu, self.hardware.logical_cpus, self.hardware.os, self.hardware.arch)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Encodes once with the chosen encoder; returns the output length.
pub fn encode_once(encoder: EncoderKind, stream: &EventStream, cfg: &GetConfig, workers: usize) -> Result<usize> {
    Ok(match encoder {
        EncoderKind::GroupToken => std::hint::black_box(encode_group_tokens(stream, &cfg.gte(), workers)?).data.len(),
        EncoderKind::Histogram => std::hint::black_box(encode_event_histogram(stream, workers)?).numel(),
        EncoderKind::Voxel => std::hint::black_box(encode_voxel_grid(stream, cfg.k, workers)?).numel(),
    })
}

/// Times `runs` encodings of an already generated stream.
pub fn bench_stream(encoder: EncoderKind, stream: &EventStream, opts: &BenchOptions) -> Result<BenchReport> {
    if opts.runs == 0 {
        return Err(Error::Config("--runs must be >= 1".into()));
    }
    let mut times = Vec::with_capacity(opts.runs);
    with_threads(opts.threads, || -> Result<()> {
        for _ in 0..opts.runs {
            let start = Instant::now();
            encode_once(encoder, stream, &opts.config, opts.threads)?;
            times.push(start.elapsed().as_secs_f64());
        }
        Ok(())
    })??;
    let med = median(&times);
    let per_1e8 = med * 1e8 / stream.len().max(1) as f64;
    let reference = encoder.reference_seconds_per_1e8();
    Ok(BenchReport {
        encoder,
        events: stream.len(),
        threads: opts.threads,
        motion: format!("{:?}", opts.motion),
        min_seconds: times.iter().copied().fold(f64::INFINITY, f64::min),
        run_seconds: times,
        median_seconds: med,
        events_per_second: stream.len() as f64 / med,
        seconds_per_1e8: per_1e8,
        reference_seconds_per_1e8: reference,
        comparison: format!(
            "{per_1e8:.3} s per 1e8 events vs published {reference:.3} s ({:.1}x)",
            per_1e8 / reference
        ),
        hardware: Hardware::detect(),
    })
}

/// Generates a synthetic stream (untimed), then times the encoder.
pub fn cmd_encode_bench(opts: &BenchOptions) -> Result<BenchReport> {
    if opts.events == 0 {
        return Err(Error::Config("--events must be >= 1".into()));
    }
    opts.config.validate()?;
    let stream = generate_synthetic_stream(
        opts.seed,
        opts.events,
        opts.config.sensor_width,
        opts.config.sensor_height,
        opts.duration,
        opts.motion,
    );
    bench_stream(opts.encoder, &stream, opts)
}

#[derive(Debug, Clone, Serialize)]
pub struct ShapeRow {
    pub stage: usize,
    pub grid: (usize, usize),
    pub tokens: usize,
    pub groups: usize,
    pub channels: usize,
    pub channels_per_group: usize,
    pub blocks: usize,
    /// Aggregation entering the stage: `(GK, GS, zero padding groups)`.
    pub aggregation: Option<(usize, usize, usize)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ShapesReport {
    pub stages: Vec<ShapeRow>,
    pub parameters: usize,
}

impl fmt::Display for ShapesReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "stage  grid     tokens  groups  channels  C   blocks  GK/GS/pad")?;
        for r in &self.stages {
            let agg = r
                .aggregation
                .map_or("-".to_string(), |(k, s, p)| format!("{k}/{s}/{p}"));
            writeln!(
                f,
                "{:<6} {:<8} {:<7} {:<7} {:<9} {:<3} {:<7} {}",
                r.stage,
                format!("{}x{}", r.grid.0, r.grid.1),
                r.tokens,
                r.groups,
                r.channels,
                r.channels_per_group,
                r.blocks,
                agg
            )?;
        }
        write!(f, "parameters: {}", self.parameters)
    }
}

pub fn cmd_shapes(cfg: &GetConfig) -> Result<ShapesReport> {
    let stages = cfg
        .stage_shapes()?
        .iter()
        .enumerate()
        .map(|(i, s)| ShapeRow {
            stage: i,
            grid: s.grid,
            tokens: s.tokens(),
            groups: s.groups,
            channels: s.channels,
            channels_per_group: s.channels_per_group(),
            blocks: s.blocks,
            aggregation: s.entry.map(|g| (g.group_kernel, g.group_stride, g.padding_groups())),
        })
        .collect();
    let parameters = crate::model::count_parameters(&crate::model::build_model::<f32>(cfg)?);
    Ok(ShapesReport { stages, parameters })
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub samples: usize,
    pub steps: usize,
    pub optimizer: String,
    pub lr: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub checkpoint: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
}

impl fmt::Display for TrainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "trained {} steps ({} lr={}) on {} samples",
            self.steps, self.optimizer, self.lr, self.samples
        )?;
        writeln!(f, "loss {:.4} -> {:.4}", self.initial_loss, self.final_loss)?;
        write!(f, "train accuracy {:.1}%", 100.0 * self.train_accuracy)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub samples: usize,
    pub data_seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
}

/// Trains on the two-class toy set and optionally writes a checkpoint and
/// the loss curve.
pub fn cmd_train_toy(cfg: &GetConfig, tcfg: &TrainConfig, opts: &TrainOptions) -> Result<(TrainReport, TrainOutcome)> {
    if cfg.num_classes < 2 {
        return Err(Error::Config("the toy set has 2 classes".into()));
    }
    let data = toy_dataset(opts.data_seed, opts.samples, cfg);
    let outcome = train_toy(&data, cfg, tcfg)?;
    let acc = evaluate(&data, &outcome.params, cfg)?;
    if let Some(path) = &opts.checkpoint {
        save_checkpoint(path, cfg, &outcome.params)?;
    }
    if let Some(path) = &opts.loss_csv {
        write_loss_csv(path, &outcome.losses)?;
    }
    let report = TrainReport {
        samples: data.len(),
        steps: outcome.losses.len(),
        optimizer: tcfg.optimizer.to_string(),
        lr: tcfg.lr,
        initial_loss: outcome.losses[0],
        final_loss: *outcome.losses.last().expect("steps >= 1"),
        train_accuracy: acc,
        checkpoint: opts.checkpoint.clone(),
        loss_csv: opts.loss_csv.clone(),
    };
    Ok((report, outcome))
}

#[derive(Debug, Clone, Serialize)]
pub struct InferReport {
    pub events: usize,
    pub class: usize,
    pub probabilities: Vec<f64>,
}

impl fmt::Display for InferReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let probs: Vec<String> = self.probabilities.iter().map(|p| format!("{p:.4}")).collect();
        write!(f, "{} events -> class {} [{}]", self.events, self.class, probs.join(", "))
    }
}

/// Classifies an event file with a checkpoint. A supplied config must match
/// the checkpoint's exactly.
pub fn cmd_infer(
    checkpoint: impl AsRef<Path>,
    events: impl AsRef<Path>,
    format: EventFormat,
    expected: Option<&GetConfig>,
) -> Result<InferReport> {
    let (cfg, params) = load_checkpoint(checkpoint)?;
    if let Some(exp) = expected {
        if *exp != cfg {
            return Err(Error::Config("config does not match the checkpoint".into()));
        }
    }
    let stream = load_events(events, format, Some((cfg.sensor_width, cfg.sensor_height)))?;
    let (class, probabilities) = classify(&stream, &params, &cfg)?;
    Ok(InferReport {
        events: stream.len(),
        class,
        probabilities,
    })
}

/// Writes a synthetic stream in the requested format.
pub fn cmd_gen_events(
    path: impl AsRef<Path>,
    format: EventFormat,
    seed: u64,
    events: usize,
    sensor: (u32, u32),
    duration: u64,
    motion: MotionModel,
) -> Result<EventStream> {
    if sensor.0 == 0 || sensor.1 == 0 || duration == 0 {
        return Err(Error::Config("sensor size and duration must be positive".into()));
    }
    let stream = generate_synthetic_stream(seed, events, sensor.0, sensor.1, duration, motion);
    match format {
        EventFormat::Binary => crate::events::save_events_binary(&stream, path)?,
        EventFormat::Csv => crate::events::save_events_csv(&stream, path)?,
    }
    Ok(stream)
}
