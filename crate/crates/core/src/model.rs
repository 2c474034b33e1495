//! Model configuration, parameters, forward pass and checkpoints.
//!
//! A model is a token embedding followed by stages of attention blocks.
//! Every stage after the first starts with an aggregation step that halves
//! the group count, doubles the width and halves the token grid. Stages do
//! not share residual streams: the group stream restarts at zero.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::edsa::{edsa_block_forward, BlockVariant, EdsaParams, EdsaState, WindowLayout};
use crate::error::{Error, Result};
use crate::events::EventStream;
use crate::group_token::{
    encode_group_tokens, group_token_embed, GroupRepresentation, GteConfig, GteParams, TokenMode,
};
use crate::gta::{gta_forward, GtaGeometry, GtaParams};
use crate::layers::{linear, LN_EPS};
use crate::params::{Binder, Initializer, Param, ParamSet};
use crate::tensor::{softmax, Element, Tensor};

/// Standard deviation of the truncated-normal weight initialisation.
pub const INIT_STD: f64 = 0.02;

/// Full model hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GetConfig {
    pub sensor_width: u32,
    pub sensor_height: u32,
    /// Time bins.
    pub k: usize,
    /// Patch side.
    pub p: usize,
    /// Channel groups in the first stage.
    pub groups: usize,
    /// Total width `G·C` of the first stage.
    pub embed_dim: usize,
    /// Blocks per stage.
    pub stages: Vec<usize>,
    /// Attention window `(rows, cols)`.
    pub window: (usize, usize),
    pub variant: BlockVariant,
    pub num_classes: usize,
    pub seed: u64,
    pub token_mode: TokenMode,
}

impl Default for GetConfig {
    fn default() -> Self {
        Self {
            sensor_width: 128,
            sensor_height: 128,
            k: 12,
            p: 4,
            groups: 12,
            embed_dim: 48,
            stages: vec![2, 2, 8],
            window: (8, 8),
            variant: BlockVariant::Edsa,
            num_classes: 10,
            seed: 0,
            token_mode: TokenMode::Full,
        }
    }
}

/// Per-stage layout derived from a config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageShape {
    pub grid: (usize, usize),
    pub groups: usize,
    pub channels: usize,
    pub blocks: usize,
    /// Aggregation step entering this stage; `None` for the first stage.
    pub entry: Option<GtaGeometry>,
}

impl StageShape {
    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn channels_per_group(&self) -> usize {
        self.channels / self.groups
    }
}

impl GetConfig {
    /// The smallest configuration used for gradient checks and toy training:
    /// 16×16 sensor, two stages of one block each.
    pub fn micro() -> Self {
        Self {
            sensor_width: 16,
            sensor_height: 16,
            k: 2,
            p: 4,
            groups: 4,
            embed_dim: 8,
            stages: vec![1, 1],
            window: (2, 2),
            variant: BlockVariant::Edsa,
            num_classes: 2,
            seed: 0,
            token_mode: TokenMode::Full,
        }
    }

    pub fn gte(&self) -> GteConfig {
        GteConfig {
            k: self.k,
            p: self.p,
            g: self.groups,
            embed_dim: self.embed_dim,
            mode: self.token_mode,
        }
    }

    /// Checks every invariant and returns the per-stage layout. An empty
    /// stage list is accepted here (it describes a head-only model) but
    /// cannot be run forward.
    pub fn stage_shapes(&self) -> Result<Vec<StageShape>> {
        self.gte().validate()?;
        if self.sensor_width == 0 || self.sensor_height == 0 {
            return Err(Error::Config("sensor size must be positive".into()));
        }
        if self.window.0 == 0 || self.window.1 == 0 {
            return Err(Error::Config(format!("window {:?} must be positive", self.window)));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        let mut shapes: Vec<StageShape> = Vec::with_capacity(self.stages.len());
        for (s, &blocks) in self.stages.iter().enumerate() {
            let shape = match shapes.last() {
                None => StageShape {
                    grid: self.gte().token_grid(self.sensor_width, self.sensor_height),
                    groups: self.groups,
                    channels: self.embed_dim,
                    blocks,
                    entry: None,
                },
                Some(prev) => {
                    let geom = GtaGeometry::new(prev.groups, prev.channels_per_group())
                        .map_err(|e| Error::Config(format!("stage {s}: {e}")))?;
                    StageShape {
                        grid: GtaGeometry::output_grid(prev.grid),
                        groups: geom.groups_out,
                        channels: geom.channels_out(),
                        blocks,
                        entry: Some(geom),
                    }
                }
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.stage_shapes().map(|_| ())
    }

    /// Width of the features reaching the head.
    pub fn head_width(&self) -> Result<usize> {
        Ok(self.stage_shapes()?.last().map_or(self.embed_dim, |s| s.channels))
    }

    /// Canonical `key=value` text, one entry per line.
    pub fn to_text(&self) -> String {
        let stages: Vec<String> = self.stages.iter().map(|s| s.to_string()).collect();
        let mode = match self.token_mode {
            TokenMode::Full => "full",
            TokenMode::SpatialOnly => "spatial_only",
        };
        let mut out = String::new();
        let _ = writeln!(out, "sensor_width={}", self.sensor_width);
        let _ = writeln!(out, "sensor_height={}", self.sensor_height);
        let _ = writeln!(out, "k={}", self.k);
        let _ = writeln!(out, "p={}", self.p);
        let _ = writeln!(out, "groups={}", self.groups);
        let _ = writeln!(out, "embed_dim={}", self.embed_dim);
        let _ = writeln!(out, "stages={}", stages.join(","));
        let _ = writeln!(out, "window={}x{}", self.window.0, self.window.1);
        let _ = writeln!(out, "block_variant={}", self.variant);
        let _ = writeln!(out, "num_classes={}", self.num_classes);
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "token_mode={mode}");
        out
    }

    /// Parses `key=value` lines over the defaults. Blank lines and `#`
    /// comments are skipped; unknown keys are an error.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::Config(format!("line {}: bad {what} {value:?}", n + 1));
            let num = |v: &str| v.trim().parse::<usize>().map_err(|_| bad(key));
            match key {
                "sensor_width" => cfg.sensor_width = value.parse().map_err(|_| bad(key))?,
                "sensor_height" => cfg.sensor_height = value.parse().map_err(|_| bad(key))?,
                "k" => cfg.k = num(value)?,
                "p" => cfg.p = num(value)?,
                "groups" | "g" => cfg.groups = num(value)?,
                "embed_dim" => cfg.embed_dim = num(value)?,
                "stages" => {
                    cfg.stages = if value.is_empty() {
                        Vec::new()
                    } else {
                        value.split(',').map(num).collect::<Result<_>>()?
                    }
                }
                "window" => {
                    let (a, b) = value.split_once('x').ok_or_else(|| bad(key))?;
                    cfg.window = (num(a)?, num(b)?);
                }
                "block_variant" => cfg.variant = value.parse()?,
                "num_classes" => cfg.num_classes = num(value)?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad(key))?,
                "token_mode" => {
                    cfg.token_mode = match value {
                        "full" => TokenMode::Full,
                        "spatial_only" => TokenMode::SpatialOnly,
                        _ => return Err(bad(key)),
                    }
                }
                _ => return Err(Error::Config(format!("line {}: unknown key {key:?}", n + 1))),
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StageEntry<T: Element = f32> {
    Embed(GteParams<T>),
    Aggregate(GtaParams<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageParams<T: Element = f32> {
    pub entry: StageEntry<T>,
    pub blocks: Vec<EdsaParams<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T: Element = f32> {
    pub norm_gamma: Param<T>,
    pub norm_beta: Param<T>,
    pub fc_w: Param<T>,
    pub fc_b: Param<T>,
}

impl<T: Element> ParamSet<T> for HeadParams<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.norm_gamma, &self.norm_beta, &self.fc_w, &self.fc_b]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.norm_gamma, &mut self.norm_beta, &mut self.fc_w, &mut self.fc_b]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Element = f32> {
    pub stages: Vec<StageParams<T>>,
    pub head: HeadParams<T>,
}

impl<T: Element> ModelParams<T> {
    /// Same parameters in another precision.
    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        let stages = self
            .stages
            .iter()
            .map(|s| StageParams {
                entry: match &s.entry {
                    StageEntry::Embed(g) => StageEntry::Embed(GteParams {
                        conv_w: g.conv_w.cast(),
                        conv_b: g.conv_b.cast(),
                        fc1_w: g.fc1_w.cast(),
                        fc1_b: g.fc1_b.cast(),
                        fc2_w: g.fc2_w.cast(),
                        fc2_b: g.fc2_b.cast(),
                    }),
                    StageEntry::Aggregate(a) => StageEntry::Aggregate(GtaParams {
                        conv_w: a.conv_w.cast(),
                        conv_b: a.conv_b.cast(),
                        norm_gamma: a.norm_gamma.cast(),
                        norm_beta: a.norm_beta.cast(),
                    }),
                },
                blocks: s
                    .blocks
                    .iter()
                    .map(|b| EdsaParams {
                        norm1_gamma: b.norm1_gamma.cast(),
                        norm1_beta: b.norm1_beta.cast(),
                        spatial_q: b.spatial_q.cast(),
                        spatial_k: b.spatial_k.cast(),
                        spatial_v: b.spatial_v.cast(),
                        group_q: b.group_q.cast(),
                        group_k: b.group_k.cast(),
                        group_v: b.group_v.cast(),
                        position_table: b.position_table.cast(),
                        group_table: b.group_table.cast(),
                        norm2_gamma: b.norm2_gamma.cast(),
                        norm2_beta: b.norm2_beta.cast(),
                        mlp_w1: b.mlp_w1.cast(),
                        mlp_b1: b.mlp_b1.cast(),
                        mlp_w2: b.mlp_w2.cast(),
                        mlp_b2: b.mlp_b2.cast(),
                    })
                    .collect(),
            })
            .collect();
        ModelParams {
            stages,
            head: HeadParams {
                norm_gamma: self.head.norm_gamma.cast(),
                norm_beta: self.head.norm_beta.cast(),
                fc_w: self.head.fc_w.cast(),
                fc_b: self.head.fc_b.cast(),
            },
        }
    }
}

impl<T: Element> ParamSet<T> for ModelParams<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for stage in &self.stages {
            match &stage.entry {
                StageEntry::Embed(g) => out.extend(g.params()),
                StageEntry::Aggregate(a) => out.extend(a.params()),
            }
            for b in &stage.blocks {
                out.extend(b.params());
            }
        }
        out.extend(self.head.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for stage in &mut self.stages {
            match &mut stage.entry {
                StageEntry::Embed(g) => out.extend(g.params_mut()),
                StageEntry::Aggregate(a) => out.extend(a.params_mut()),
            }
            for b in &mut stage.blocks {
                out.extend(b.params_mut());
            }
        }
        out.extend(self.head.params_mut());
        out
    }
}

/// Seeded initialisation: truncated-normal weights, zero biases and bias
/// tables, unit norm gains.
pub fn build_model<T: Element>(cfg: &GetConfig) -> Result<ModelParams<T>> {
    let shapes = cfg.stage_shapes()?;
    let mut init = Initializer::new(cfg.seed, INIT_STD);
    let mut stages = Vec::with_capacity(shapes.len());
    for (s, shape) in shapes.iter().enumerate() {
        let entry = match &shape.entry {
            None => StageEntry::Embed(GteParams::init(&cfg.gte(), &mut init)?),
            Some(geom) => StageEntry::Aggregate(GtaParams::init(&format!("stage{s}.gta."), geom, &mut init)),
        };
        let blocks = (0..shape.blocks)
            .map(|b| {
                EdsaParams::init(
                    &format!("stage{s}.block{b}."),
                    shape.channels,
                    shape.groups,
                    cfg.window,
                    &mut init,
                )
            })
            .collect::<Result<_>>()?;
        stages.push(StageParams { entry, blocks });
    }
    let width = cfg.head_width()?;
    let head = HeadParams {
        norm_gamma: Param::ones("head.norm.weight", vec![width]),
        norm_beta: Param::zeros("head.norm.bias", vec![width]),
        fc_w: init.trunc_normal("head.fc.weight", vec![width, cfg.num_classes]),
        fc_b: Param::zeros("head.fc.bias", vec![cfg.num_classes]),
    };
    Ok(ModelParams { stages, head })
}

/// Exact number of trainable scalars.
pub fn count_parameters<T: Element>(params: &ModelParams<T>) -> usize {
    params.count()
}

/// Encodes a stream for `cfg` on a single worker.
pub fn encode_stream(stream: &EventStream, cfg: &GetConfig) -> Result<GroupRepresentation> {
    if (stream.width, stream.height) != (cfg.sensor_width, cfg.sensor_height) {
        return Err(Error::Config(format!(
            "stream is {}x{}, model expects {}x{}",
            stream.width, stream.height, cfg.sensor_width, cfg.sensor_height
        )));
    }
    encode_group_tokens(stream, &cfg.gte(), 1)
}

fn check_params<T: Element>(params: &ModelParams<T>, shapes: &[StageShape]) -> Result<()> {
    if params.stages.len() != shapes.len()
        || params.stages.iter().zip(shapes).any(|(p, s)| p.blocks.len() != s.blocks)
    {
        return Err(Error::Config("parameters do not match the configured stages".into()));
    }
    Ok(())
}

/// Token field `F_s + F_g` after the last stage, `[tokens, width]`, and its grid.
pub fn forward_features<T: Element>(
    rep: &GroupRepresentation,
    params: &ModelParams<T>,
    cfg: &GetConfig,
    binder: &Binder<T>,
) -> Result<(Tensor<T>, (usize, usize))> {
    let shapes = cfg.stage_shapes()?;
    if shapes.is_empty() {
        return Err(Error::Config("a model without stages has no forward pass".into()));
    }
    check_params(params, &shapes)?;
    let mut grid = rep.grid;
    let mut x: Option<Tensor<T>> = None;
    for (stage, shape) in params.stages.iter().zip(&shapes) {
        let tokens = match (&stage.entry, x.take()) {
            (StageEntry::Embed(g), None) => group_token_embed(rep, g, &cfg.gte(), binder)?,
            (StageEntry::Aggregate(a), Some(prev)) => {
                let geom = shape.entry.expect("later stages aggregate");
                let (y, g) = gta_forward(&prev, grid, &geom, a, binder)?;
                grid = g;
                y
            }
            _ => return Err(Error::Config("stage entries out of order".into())),
        };
        let layout = WindowLayout::new(grid, cfg.window)?;
        let mut state = EdsaState::enter(tokens);
        for block in &stage.blocks {
            state = edsa_block_forward(&state, block, &layout, cfg.variant, binder)?;
        }
        x = Some(state.merged()?);
    }
    Ok((x.expect("at least one stage"), grid))
}

/// Class logits from an encoded representation.
pub fn forward_logits<T: Element>(
    rep: &GroupRepresentation,
    params: &ModelParams<T>,
    cfg: &GetConfig,
    binder: &Binder<T>,
) -> Result<Tensor<T>> {
    let (features, _) = forward_features(rep, params, cfg, binder)?;
    head_forward(&features, &params.head, binder)
}

/// Mean over tokens, layer norm, linear.
pub fn head_forward<T: Element>(features: &Tensor<T>, head: &HeadParams<T>, binder: &Binder<T>) -> Result<Tensor<T>> {
    let pooled = features.mean_leading()?;
    let normed = pooled.layer_norm(&binder.bind(&head.norm_gamma), &binder.bind(&head.norm_beta), LN_EPS)?;
    let d = normed.numel();
    linear(&normed.reshape(vec![1, d])?, &binder.bind(&head.fc_w), Some(&binder.bind(&head.fc_b)))?
        .reshape(vec![head.fc_b.numel()])
}

/// Logits `[num_classes]` for a stream.
pub fn model_forward<T: Element>(stream: &EventStream, params: &ModelParams<T>, cfg: &GetConfig) -> Result<Tensor<T>> {
    let rep = encode_stream(stream, cfg)?;
    forward_logits(&rep, params, cfg, &Binder::inference())
}

/// Argmax class (first index on ties) and the softmax probabilities.
pub fn classify<T: Element>(stream: &EventStream, params: &ModelParams<T>, cfg: &GetConfig) -> Result<(usize, Vec<f64>)> {
    let logits = model_forward(stream, params, cfg)?;
    Ok(classify_logits(logits.data()))
}

pub fn classify_logits<T: Element>(logits: &[T]) -> (usize, Vec<f64>) {
    let probs = softmax(logits);
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    (best, probs)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GETW";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Config(format!("{v} does not fit in a u32 field")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

/// Writes the config and every parameter in declaration order.
pub fn save_checkpoint(path: impl AsRef<Path>, cfg: &GetConfig, params: &ModelParams<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let text = cfg.to_text();
    put_u32(&mut w, text.len())?;
    w.write_all(text.as_bytes())?;
    for p in params.params() {
        put_u32(&mut w, p.name.len())?;
        w.write_all(p.name.as_bytes())?;
        put_u32(&mut w, p.shape.len())?;
        for &d in &p.shape {
            put_u32(&mut w, d)?;
        }
        for v in &p.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct ByteReader<'a> {
    rest: &'a [u8],
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.rest.len() < n {
            return Err(self.err("truncated"));
        }
        let (head, rest) = self.rest.split_at(n);
        self.rest = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn str(&mut self, what: &str) -> Result<&'a str> {
        let n = self.u32()?;
        let bytes = self.take(n)?;
        std::str::from_utf8(bytes).map_err(|_| self.err(format!("{what} is not UTF-8")))
    }
}

/// Reads a checkpoint, checking every tensor against the stored config.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(GetConfig, ModelParams<f32>)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let mut r = ByteReader { rest: &bytes, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(r.err("bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let cfg = GetConfig::from_text(r.str("config")?)?;
    let mut params = build_model::<f32>(&cfg)?;
    for p in params.params_mut() {
        let name = r.str("name")?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if name != p.name || shape != p.shape {
            return Err(r.err(format!(
                "tensor {name} {shape:?} where the config declares {} {:?}",
                p.name, p.shape
            )));
        }
        let raw = r.take(4 * p.data.len())?;
        for (v, b) in p.data.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
        }
    }
    if !r.rest.is_empty() {
        return Err(r.err("trailing bytes"));
    }
    Ok((cfg, params))
}
