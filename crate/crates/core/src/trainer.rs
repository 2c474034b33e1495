//! Small full-graph training loop for toy data.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::events::{generate_synthetic_stream, EventStream, MotionModel};
use crate::group_token::GroupRepresentation;
use crate::model::{build_model, classify_logits, encode_stream, forward_logits, GetConfig, ModelParams};
use crate::params::{Binder, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub lr: f64,
    pub steps: usize,
    /// Samples per step; the dataset is reshuffled every epoch. A batch as
    /// large as the dataset gives full-batch training.
    pub batch_size: usize,
    pub seed: u64,
    /// Parameters whose name contains any of these substrings get a zero
    /// gradient, so they keep their initial values.
    pub frozen: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            lr: 3e-3,
            steps: 200,
            batch_size: 64,
            seed: 0,
            frozen: Vec::new(),
        }
    }
}

impl TrainConfig {
    /// Name fragment shared by every group-attention parameter.
    pub const GROUP_ATTENTION: &'static str = "gsa.";

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|f| name.contains(f.as_str()))
    }
}

/// Per-step mean batch loss, plus the trained parameters.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub losses: Vec<f64>,
}

/// One parameter update given gradients aligned with `params.params_mut()`.
pub struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn apply<P: ParamSet<f32>>(&mut self, params: &mut P, grads: &[Vec<f32>]) {
        self.step += 1;
        let mut slots = params.params_mut();
        if self.m.is_empty() {
            self.m = slots.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        for (i, (p, g)) in slots.iter_mut().zip(grads).enumerate() {
            match self.kind {
                Optimizer::Sgd => {
                    for (w, &g) in p.data.iter_mut().zip(g) {
                        *w = (f64::from(*w) - self.lr * f64::from(g)) as f32;
                    }
                }
                Optimizer::Adam => {
                    let (b1, b2) = (ADAM_BETA1, ADAM_BETA2);
                    let c1 = 1.0 - b1.powi(self.step);
                    let c2 = 1.0 - b2.powi(self.step);
                    for (j, (w, &g)) in p.data.iter_mut().zip(g).enumerate() {
                        let g = f64::from(g);
                        let m = &mut self.m[i][j];
                        let v = &mut self.v[i][j];
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        let step = self.lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                        *w = (f64::from(*w) - step) as f32;
                    }
                }
            }
        }
    }
}

fn check_dataset(dataset: &[(EventStream, usize)], cfg: &GetConfig) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some((i, (_, label))) = dataset.iter().enumerate().find(|(_, (_, l))| *l >= cfg.num_classes) {
        return Err(Error::Config(format!(
            "sample {i} has label {label} but the model has {} classes",
            cfg.num_classes
        )));
    }
    Ok(())
}

/// Mean cross-entropy of a batch and its gradients, in declaration order.
pub fn batch_loss_and_grads(
    reps: &[(&GroupRepresentation, usize)],
    params: &ModelParams<f32>,
    cfg: &GetConfig,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let binder = Binder::training();
    let mut total: Option<Tensor<f32>> = None;
    for (rep, label) in reps {
        let loss = forward_logits(rep, params, cfg, &binder)?.cross_entropy(*label)?;
        total = Some(match total {
            None => loss,
            Some(t) => t.add(&loss)?,
        });
    }
    let loss = total.ok_or(Error::EmptyDataset)?.scale(1.0 / reps.len() as f64);
    loss.backward()?;
    let grads = params
        .params()
        .iter()
        .map(|p| binder.grad(&p.name).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    Ok((f64::from(loss.item()), grads))
}

/// Trains a freshly built model on `dataset`.
pub fn train_toy(dataset: &[(EventStream, usize)], cfg: &GetConfig, tcfg: &TrainConfig) -> Result<TrainOutcome> {
    tcfg.validate()?;
    check_dataset(dataset, cfg)?;
    let params = build_model::<f32>(cfg)?;
    train_from(dataset, params, cfg, tcfg)
}

/// Continues training from `params`.
pub fn train_from(
    dataset: &[(EventStream, usize)],
    mut params: ModelParams<f32>,
    cfg: &GetConfig,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    check_dataset(dataset, cfg)?;
    let reps = dataset
        .iter()
        .map(|(s, _)| encode_stream(s, cfg))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = params.params().iter().map(|p| p.name.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let batch = tcfg.batch_size.min(dataset.len());
    let mut opt = OptimizerState::new(tcfg.optimizer, tcfg.lr);
    let mut losses = Vec::with_capacity(tcfg.steps);
    for _ in 0..tcfg.steps {
        let mut picked = Vec::with_capacity(batch);
        while picked.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }
        // losses are summed in index order so a batch's result does not
        // depend on the shuffle
        picked.sort_unstable();
        let items: Vec<_> = picked.iter().map(|&i| (&reps[i], dataset[i].1)).collect();
        let (loss, mut grads) = batch_loss_and_grads(&items, &params, cfg)?;
        for (name, g) in names.iter().zip(grads.iter_mut()) {
            if tcfg.is_frozen(name) {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        losses.push(loss);
        opt.apply(&mut params, &grads);
    }
    Ok(TrainOutcome { params, losses })
}

/// Fraction of samples whose top-1 class equals the label.
pub fn evaluate(dataset: &[(EventStream, usize)], params: &ModelParams<f32>, cfg: &GetConfig) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let binder = Binder::inference();
    let mut correct = 0usize;
    for (stream, label) in dataset {
        let logits = forward_logits(&encode_stream(stream, cfg)?, params, cfg, &binder)?;
        if classify_logits(logits.data()).0 == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Writes `step,loss` rows.
pub fn write_loss_csv(path: impl AsRef<Path>, losses: &[f64]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{i},{l}")?;
    }
    w.flush()?;
    Ok(())
}

/// Events per toy sample and their time span (µs).
pub const TOY_EVENTS: usize = 1500;
pub const TOY_DURATION: u64 = 50_000;

/// Two-class toy set: even indices are moving bars (label 0), odd indices
/// rotating dots (label 1).
pub fn toy_dataset(seed: u64, samples: usize, cfg: &GetConfig) -> Vec<(EventStream, usize)> {
    (0..samples)
        .map(|i| {
            let (motion, label) = if i % 2 == 0 {
                (MotionModel::MovingBar, 0)
            } else {
                (MotionModel::RotatingDot, 1)
            };
            let s = generate_synthetic_stream(
                seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
                TOY_EVENTS,
                cfg.sensor_width,
                cfg.sensor_height,
                TOY_DURATION,
                motion,
            );
            (s, label)
        })
        .collect()
}
