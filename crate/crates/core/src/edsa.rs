//! Windowed spatial self-attention, channel-group self-attention and the
//! dual-stream attention block.
//!
//! Attention is single-head. Tokens are split into non-overlapping windows of
//! `Wh×Ww`; grids that do not tile evenly are zero-padded on the bottom/right
//! and padded positions are excluded from every softmax as keys.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::{linear, LN_EPS};
use crate::params::{Binder, Initializer, Param, ParamSet};
use crate::tensor::{Element, Tensor};

/// Block wiring. Every variant other than [`BlockVariant::Edsa`] is a single
/// residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlockVariant {
    SsaOnly,
    /// `x + SSA(LN x) + GSA(LN x)`
    Parallel,
    /// `x + SSA(GSA(LN x))`
    SeriesGsaFirst,
    /// `x + GSA(SSA(LN x))`
    SeriesSsaFirst,
    #[default]
    Edsa,
}

impl BlockVariant {
    pub const ALL: [BlockVariant; 5] = [
        Self::SsaOnly,
        Self::Parallel,
        Self::SeriesGsaFirst,
        Self::SeriesSsaFirst,
        Self::Edsa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::SsaOnly => "ssa_only",
            Self::Parallel => "parallel",
            Self::SeriesGsaFirst => "series_gsa_first",
            Self::SeriesSsaFirst => "series_ssa_first",
            Self::Edsa => "edsa",
        }
    }
}

impl fmt::Display for BlockVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown block variant {s:?}")))
    }
}

/// Window tiling of a token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub grid: (usize, usize),
    pub window: (usize, usize),
    /// Windows per column and per row of the grid.
    pub counts: (usize, usize),
}

impl WindowLayout {
    pub fn new(grid: (usize, usize), window: (usize, usize)) -> Result<Self> {
        if grid.0 == 0 || grid.1 == 0 || window.0 == 0 || window.1 == 0 {
            return Err(Error::ShapeMismatch(format!(
                "grid {grid:?} with window {window:?}"
            )));
        }
        Ok(Self {
            grid,
            window,
            counts: (grid.0.div_ceil(window.0), grid.1.div_ceil(window.1)),
        })
    }

    /// Number of windows, `M`.
    pub fn windows(&self) -> usize {
        self.counts.0 * self.counts.1
    }

    /// Positions per window, `S = Wh·Ww`.
    pub fn window_len(&self) -> usize {
        self.window.0 * self.window.1
    }

    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_padded(&self) -> bool {
        !self.grid.0.is_multiple_of(self.window.0) || !self.grid.1.is_multiple_of(self.window.1)
    }

    /// Token feeding position `s` of window `m`, or `None` for padding.
    pub fn source(&self, m: usize, s: usize) -> Option<usize> {
        let (wr, wc) = (m / self.counts.1, m % self.counts.1);
        let (sr, sc) = (s / self.window.1, s % self.window.1);
        let (r, c) = (wr * self.window.0 + sr, wc * self.window.1 + sc);
        (r < self.grid.0 && c < self.grid.1).then(|| r * self.grid.1 + c)
    }

    /// Validity of every `(window, position)` slot, window-major.
    pub fn valid(&self) -> Vec<bool> {
        let s = self.window_len();
        (0..self.windows() * s).map(|i| self.source(i / s, i % s).is_some()).collect()
    }
}

/// `[tokens, D]` to `[M, S, D]`; padded slots are zero.
pub fn window_partition<T: Element>(x: &Tensor<T>, layout: &WindowLayout) -> Result<Tensor<T>> {
    if x.rank() != 2 || x.shape()[0] != layout.tokens() {
        return Err(Error::ShapeMismatch(format!(
            "window_partition: {:?} for grid {:?}",
            x.shape(),
            layout.grid
        )));
    }
    let d = x.shape()[1];
    let s = layout.window_len();
    let idx: Vec<Option<usize>> = (0..layout.windows() * s)
        .flat_map(|slot| {
            let src = layout.source(slot / s, slot % s);
            (0..d).map(move |c| src.map(|t| t * d + c))
        })
        .collect();
    x.gather(Rc::new(idx), vec![layout.windows(), s, d])
}

/// Inverse of [`window_partition`]; padded slots are dropped.
pub fn window_reverse<T: Element>(y: &Tensor<T>, layout: &WindowLayout) -> Result<Tensor<T>> {
    let s = layout.window_len();
    if y.rank() != 3 || y.shape()[0] != layout.windows() || y.shape()[1] != s {
        return Err(Error::ShapeMismatch(format!(
            "window_reverse: {:?} for {} windows of {s}",
            y.shape(),
            layout.windows()
        )));
    }
    let d = y.shape()[2];
    let mut slot_of = vec![0; layout.tokens()];
    for slot in 0..layout.windows() * s {
        if let Some(t) = layout.source(slot / s, slot % s) {
            slot_of[t] = slot;
        }
    }
    let idx: Vec<Option<usize>> = slot_of
        .iter()
        .flat_map(|&slot| (0..d).map(move |c| Some(slot * d + c)))
        .collect();
    y.gather(Rc::new(idx), vec![layout.tokens(), d])
}

/// Table index of every `(query, key)` pair of a window, row-major `S×S`.
pub fn relative_position_index(window: (usize, usize)) -> Vec<usize> {
    let (wh, ww) = window;
    let s = wh * ww;
    let mut idx = Vec::with_capacity(s * s);
    for i in 0..s {
        for j in 0..s {
            let dr = (i / ww) as isize - (j / ww) as isize + wh as isize - 1;
            let dc = (i % ww) as isize - (j % ww) as isize + ww as isize - 1;
            idx.push(dr as usize * (2 * ww - 1) + dc as usize);
        }
    }
    idx
}

pub fn relative_position_table_len(window: (usize, usize)) -> usize {
    (2 * window.0 - 1) * (2 * window.1 - 1)
}

/// Spatial bias `[S, S]` read from a `(2Wh−1)(2Ww−1)` table.
pub fn build_relative_position_bias<T: Element>(table: &Tensor<T>, window: (usize, usize)) -> Result<Tensor<T>> {
    let len = relative_position_table_len(window);
    if table.shape() != [len] {
        return Err(Error::ShapeMismatch(format!(
            "position table {:?}, expected [{len}]",
            table.shape()
        )));
    }
    let s = window.0 * window.1;
    let idx = relative_position_index(window).into_iter().map(Some).collect();
    table.gather(Rc::new(idx), vec![s, s])
}

/// Table index of every channel pair: `group(i) − group(j) + G − 1`.
pub fn relative_group_index(groups: usize, channels_per_group: usize) -> Vec<usize> {
    let d = groups * channels_per_group;
    let mut idx = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            idx.push(i / channels_per_group + groups - 1 - j / channels_per_group);
        }
    }
    idx
}

/// Channel bias `[G·C, G·C]` read from a `2G−1` table.
pub fn build_relative_group_bias<T: Element>(
    table: &Tensor<T>,
    groups: usize,
    channels_per_group: usize,
) -> Result<Tensor<T>> {
    if groups == 0 || channels_per_group == 0 || table.shape() != [2 * groups - 1] {
        return Err(Error::ShapeMismatch(format!(
            "group table {:?} for G={groups}",
            table.shape()
        )));
    }
    let d = groups * channels_per_group;
    let idx = relative_group_index(groups, channels_per_group).into_iter().map(Some).collect();
    table.gather(Rc::new(idx), vec![d, d])
}

/// Lifts `[S, D]` to `[1, S, D]`; returns whether it did.
fn as_windows<T: Element>(x: &Tensor<T>) -> Result<(Tensor<T>, bool)> {
    match x.rank() {
        2 => Ok((x.reshape(vec![1, x.shape()[0], x.shape()[1]])?, true)),
        3 => Ok((x.clone(), false)),
        _ => Err(Error::ShapeMismatch(format!("attention input {:?}", x.shape()))),
    }
}

fn check_square<T: Element>(w: &Tensor<T>, n: usize, what: &str) -> Result<()> {
    if w.shape() != [n, n] {
        return Err(Error::ShapeMismatch(format!(
            "{what} weight {:?}, expected [{n}, {n}]",
            w.shape()
        )));
    }
    Ok(())
}

/// Constant masks for padded window slots.
struct SlotMasks<T: Element> {
    /// `[M, S, S]`: −∞ on padded key columns.
    keys: Tensor<T>,
    /// `[M, S, D]`: zero on padded rows.
    rows: Tensor<T>,
}

impl<T: Element> SlotMasks<T> {
    fn new(valid: &[bool], m: usize, s: usize, d: usize) -> Result<Self> {
        if valid.len() != m * s {
            return Err(Error::ShapeMismatch(format!(
                "{} slot flags for {m} windows of {s}",
                valid.len()
            )));
        }
        let keys = (0..m * s * s)
            .map(|i| {
                let (w, j) = (i / (s * s), i % s);
                if valid[w * s + j] {
                    T::zero()
                } else {
                    T::neg_infinity()
                }
            })
            .collect();
        let rows = (0..m * s * d)
            .map(|i| if valid[i / d] { T::one() } else { T::zero() })
            .collect();
        Ok(Self {
            keys: Tensor::new(vec![m, s, s], keys)?,
            rows: Tensor::new(vec![m, s, d], rows)?,
        })
    }
}

/// `Softmax(QKᵀ/√D + B_p)V` per window, with `Q, K, V = xW_Q, xW_K, xW_V`.
///
/// `x` is `[M, S, D]` or `[S, D]`. With `valid`, padded slots are masked as
/// keys and their output rows are zero.
pub fn spatial_self_attention<T: Element>(
    x: &Tensor<T>,
    wq: &Tensor<T>,
    wk: &Tensor<T>,
    wv: &Tensor<T>,
    bias: &Tensor<T>,
    valid: Option<&[bool]>,
) -> Result<Tensor<T>> {
    let (xw, lifted) = as_windows(x)?;
    let (m, s, d) = (xw.shape()[0], xw.shape()[1], xw.shape()[2]);
    for (w, n) in [(wq, "query"), (wk, "key"), (wv, "value")] {
        check_square(w, d, n)?;
    }
    if bias.shape() != [s, s] {
        return Err(Error::ShapeMismatch(format!("position bias {:?} for S={s}", bias.shape())));
    }
    let masks = valid.map(|v| SlotMasks::new(v, m, s, d)).transpose()?;
    let q = xw.matmul(wq)?;
    let k = xw.matmul(wk)?;
    let v = xw.matmul(wv)?;
    let mut logits = q.bmm(&k, true)?.scale(1.0 / (d as f64).sqrt()).add_broadcast(bias)?;
    if let Some(mk) = &masks {
        logits = logits.add(&mk.keys)?;
    }
    let mut out = logits.softmax_lastdim().bmm(&v, false)?;
    if let Some(mk) = &masks {
        out = out.mul(&mk.rows)?;
    }
    if lifted {
        out = out.reshape(vec![s, d])?;
    }
    Ok(out)
}

/// `Softmax(Q_g K_gᵀ/√S + B_g)V_g` per window, with `Q_g = xᵀW_Qg` etc.:
/// attention between the `D` channels, each described by its `S` values.
pub fn group_self_attention<T: Element>(
    x: &Tensor<T>,
    wq: &Tensor<T>,
    wk: &Tensor<T>,
    wv: &Tensor<T>,
    bias: &Tensor<T>,
    valid: Option<&[bool]>,
) -> Result<Tensor<T>> {
    let (xw, lifted) = as_windows(x)?;
    let (m, s, d) = (xw.shape()[0], xw.shape()[1], xw.shape()[2]);
    for (w, n) in [(wq, "group query"), (wk, "group key"), (wv, "group value")] {
        check_square(w, s, n)?;
    }
    if bias.shape() != [d, d] {
        return Err(Error::ShapeMismatch(format!("group bias {:?} for D={d}", bias.shape())));
    }
    let xt = xw.transpose_last2()?;
    let q = xt.matmul(wq)?;
    let k = xt.matmul(wk)?;
    let v = xt.matmul(wv)?;
    let logits = q.bmm(&k, true)?.scale(1.0 / (s as f64).sqrt()).add_broadcast(bias)?;
    let mut out = logits.softmax_lastdim().bmm(&v, false)?.transpose_last2()?;
    if let Some(v) = valid {
        out = out.mul(&SlotMasks::new(v, m, s, d)?.rows)?;
    }
    if lifted {
        out = out.reshape(vec![s, d])?;
    }
    Ok(out)
}

/// Weights of one attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct EdsaParams<T: Element = f32> {
    pub norm1_gamma: Param<T>,
    pub norm1_beta: Param<T>,
    /// `[D, D]` spatial projections.
    pub spatial_q: Param<T>,
    pub spatial_k: Param<T>,
    pub spatial_v: Param<T>,
    /// `[S, S]` group projections.
    pub group_q: Param<T>,
    pub group_k: Param<T>,
    pub group_v: Param<T>,
    pub position_table: Param<T>,
    pub group_table: Param<T>,
    pub norm2_gamma: Param<T>,
    pub norm2_beta: Param<T>,
    pub mlp_w1: Param<T>,
    pub mlp_b1: Param<T>,
    pub mlp_w2: Param<T>,
    pub mlp_b2: Param<T>,
}

pub const MLP_RATIO: usize = 4;

impl<T: Element> EdsaParams<T> {
    /// `dim = G·C`; parameter names are prefixed with `prefix`.
    pub fn init(
        prefix: &str,
        dim: usize,
        groups: usize,
        window: (usize, usize),
        init: &mut Initializer,
    ) -> Result<Self> {
        if groups == 0 || !dim.is_multiple_of(groups) || window.0 == 0 || window.1 == 0 {
            return Err(Error::Config(format!(
                "block with width {dim}, {groups} groups, window {window:?}"
            )));
        }
        let s = window.0 * window.1;
        let hidden = MLP_RATIO * dim;
        let n = |k: &str| format!("{prefix}{k}");
        Ok(Self {
            norm1_gamma: Param::ones(n("norm1.weight"), vec![dim]),
            norm1_beta: Param::zeros(n("norm1.bias"), vec![dim]),
            spatial_q: init.trunc_normal(n("ssa.q"), vec![dim, dim]),
            spatial_k: init.trunc_normal(n("ssa.k"), vec![dim, dim]),
            spatial_v: init.trunc_normal(n("ssa.v"), vec![dim, dim]),
            group_q: init.trunc_normal(n("gsa.q"), vec![s, s]),
            group_k: init.trunc_normal(n("gsa.k"), vec![s, s]),
            group_v: init.trunc_normal(n("gsa.v"), vec![s, s]),
            position_table: Param::zeros(n("ssa.position_table"), vec![relative_position_table_len(window)]),
            group_table: Param::zeros(n("gsa.group_table"), vec![2 * groups - 1]),
            norm2_gamma: Param::ones(n("norm2.weight"), vec![dim]),
            norm2_beta: Param::zeros(n("norm2.bias"), vec![dim]),
            mlp_w1: init.trunc_normal(n("mlp.fc1.weight"), vec![dim, hidden]),
            mlp_b1: Param::zeros(n("mlp.fc1.bias"), vec![hidden]),
            mlp_w2: init.trunc_normal(n("mlp.fc2.weight"), vec![hidden, dim]),
            mlp_b2: Param::zeros(n("mlp.fc2.bias"), vec![dim]),
        })
    }

    pub fn dim(&self) -> usize {
        self.norm1_gamma.shape[0]
    }

    pub fn groups(&self) -> usize {
        self.group_table.shape[0].div_ceil(2)
    }

    /// The group-attention tensors, e.g. for freezing them in an ablation.
    pub fn group_attention_params(&self) -> [&Param<T>; 4] {
        [&self.group_q, &self.group_k, &self.group_v, &self.group_table]
    }
}

impl<T: Element> ParamSet<T> for EdsaParams<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![
            &self.norm1_gamma,
            &self.norm1_beta,
            &self.spatial_q,
            &self.spatial_k,
            &self.spatial_v,
            &self.group_q,
            &self.group_k,
            &self.group_v,
            &self.position_table,
            &self.group_table,
            &self.norm2_gamma,
            &self.norm2_beta,
            &self.mlp_w1,
            &self.mlp_b1,
            &self.mlp_w2,
            &self.mlp_b2,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.norm1_gamma,
            &mut self.norm1_beta,
            &mut self.spatial_q,
            &mut self.spatial_k,
            &mut self.spatial_v,
            &mut self.group_q,
            &mut self.group_k,
            &mut self.group_v,
            &mut self.position_table,
            &mut self.group_table,
            &mut self.norm2_gamma,
            &mut self.norm2_beta,
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
        ]
    }
}

/// The spatial stream and the group-refined stream, both `[tokens, G·C]`.
#[derive(Debug, Clone)]
pub struct EdsaState<T: Element = f32> {
    pub spatial: Tensor<T>,
    pub group: Tensor<T>,
}

impl<T: Element> EdsaState<T> {
    /// Stage entry: the group stream starts at zero.
    pub fn enter(x: Tensor<T>) -> Self {
        let group = Tensor::zeros(x.shape().to_vec());
        Self { spatial: x, group }
    }

    /// `F_s + F_g`, the features handed to the next stage or the head.
    pub fn merged(&self) -> Result<Tensor<T>> {
        self.spatial.add(&self.group)
    }
}

/// Bound tensors and window bookkeeping for one block application.
struct BlockCtx<'a, T: Element> {
    p: &'a EdsaParams<T>,
    b: &'a Binder<T>,
    layout: &'a WindowLayout,
    valid: Option<Vec<bool>>,
    position_bias: Tensor<T>,
    group_bias: Tensor<T>,
}

impl<T: Element> BlockCtx<'_, T> {
    fn ssa(&self, xw: &Tensor<T>) -> Result<Tensor<T>> {
        let (p, b) = (self.p, self.b);
        spatial_self_attention(
            xw,
            &b.bind(&p.spatial_q),
            &b.bind(&p.spatial_k),
            &b.bind(&p.spatial_v),
            &self.position_bias,
            self.valid.as_deref(),
        )
    }

    fn gsa(&self, xw: &Tensor<T>) -> Result<Tensor<T>> {
        let (p, b) = (self.p, self.b);
        group_self_attention(
            xw,
            &b.bind(&p.group_q),
            &b.bind(&p.group_k),
            &b.bind(&p.group_v),
            &self.group_bias,
            self.valid.as_deref(),
        )
    }

    fn norm(&self, x: &Tensor<T>, gamma: &Param<T>, beta: &Param<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.b.bind(gamma), &self.b.bind(beta), LN_EPS)
    }

    fn mlp(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (p, b) = (self.p, self.b);
        let h = linear(x, &b.bind(&p.mlp_w1), Some(&b.bind(&p.mlp_b1)))?.gelu();
        linear(&h, &b.bind(&p.mlp_w2), Some(&b.bind(&p.mlp_b2)))
    }

    fn windows(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        window_partition(x, self.layout)
    }

    fn tokens(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        window_reverse(y, self.layout)
    }
}

/// One attention block on a `layout.grid` token field.
pub fn edsa_block_forward<T: Element>(
    state: &EdsaState<T>,
    params: &EdsaParams<T>,
    layout: &WindowLayout,
    variant: BlockVariant,
    binder: &Binder<T>,
) -> Result<EdsaState<T>> {
    let dim = params.dim();
    let groups = params.groups();
    for t in [&state.spatial, &state.group] {
        if t.shape() != [layout.tokens(), dim] {
            return Err(Error::ShapeMismatch(format!(
                "block state {:?}, expected [{}, {dim}]",
                t.shape(),
                layout.tokens()
            )));
        }
    }
    if params.group_q.shape != [layout.window_len(), layout.window_len()]
        || params.position_table.shape != [relative_position_table_len(layout.window)]
    {
        return Err(Error::ShapeMismatch(format!(
            "block parameters do not fit window {:?}",
            layout.window
        )));
    }
    let ctx = BlockCtx {
        p: params,
        b: binder,
        layout,
        valid: layout.is_padded().then(|| layout.valid()),
        position_bias: build_relative_position_bias(&binder.bind(&params.position_table), layout.window)?,
        group_bias: build_relative_group_bias(&binder.bind(&params.group_table), groups, dim / groups)?,
    };

    let x = state.merged()?;
    let xw = ctx.windows(&ctx.norm(&x, &params.norm1_gamma, &params.norm1_beta)?)?;
    if variant == BlockVariant::Edsa {
        let a = ctx.ssa(&xw)?;
        let spatial = state.spatial.add(&ctx.tokens(&a)?)?;
        let group = state.group.add(&ctx.tokens(&ctx.gsa(&a)?)?)?;
        let h = ctx.norm(&spatial.add(&group)?, &params.norm2_gamma, &params.norm2_beta)?;
        let spatial = spatial.add(&ctx.mlp(&h)?)?;
        return Ok(EdsaState { spatial, group });
    }

    let attn = match variant {
        BlockVariant::SsaOnly => ctx.ssa(&xw)?,
        BlockVariant::Parallel => ctx.ssa(&xw)?.add(&ctx.gsa(&xw)?)?,
        BlockVariant::SeriesGsaFirst => ctx.ssa(&ctx.gsa(&xw)?)?,
        BlockVariant::SeriesSsaFirst => ctx.gsa(&ctx.ssa(&xw)?)?,
        BlockVariant::Edsa => unreachable!(),
    };
    let y = x.add(&ctx.tokens(&attn)?)?;
    let h = ctx.norm(&y, &params.norm2_gamma, &params.norm2_beta)?;
    let spatial = y.add(&ctx.mlp(&h)?)?;
    Ok(EdsaState::enter(spatial))
}
