//! Finite-difference suites for every differentiable component, in f64.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::edsa::{edsa_block_forward, BlockVariant, EdsaParams, EdsaState, WindowLayout};
use crate::error::{Error, Result};
use crate::group_token::{group_token_embed_tensor, GteConfig, GteParams};
use crate::gta::{gta_forward, GtaGeometry, GtaParams};
use crate::layers::LN_EPS;
use crate::model::{build_model, encode_stream, forward_logits, GetConfig};
use crate::params::{Binder, Initializer, ParamSet};
use crate::tensor::{finite_diff_check_multi, ChannelGrouping, GradReport, Tensor};
use crate::trainer::toy_dataset;

/// Op-level tolerance and step.
pub const OP_TOL: f64 = 1e-4;
pub const OP_EPS: f64 = 1e-3;
/// Step for composite checks without pooling.
pub const SMOOTH_EPS: f64 = 1e-4;
/// Step for checks through max pooling; small enough that pooling windows do
/// not switch winners between evaluations.
pub const POOLED_EPS: f64 = 1e-6;
pub const BLOCK_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;
/// Random shapes drawn per op.
pub const SHAPES_PER_OP: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradScope {
    Ops,
    Block,
    Model,
}

impl FromStr for GradScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Self::Ops),
            "block" => Ok(Self::Block),
            "model" => Ok(Self::Model),
            _ => Err(Error::Config(format!("unknown gradcheck scope {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct NamedCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub scope: GradScope,
    pub checks: Vec<NamedCheck>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&NamedCheck> {
        self.checks.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:<4} {:<48} coords={:<6} max_rel_err={:.3e} tol={:.0e}",
                if c.passed { "ok" } else { "FAIL" },
                c.name,
                c.coords,
                c.max_rel_err,
                c.tol
            )?;
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        write!(
            f,
            "{:?}: {} checks, {} failed -> {}",
            self.scope,
            self.checks.len(),
            failed,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Fixed, non-degenerate weights for reducing an output to a scalar.
pub fn probe(n: usize) -> Vec<f64> {
    (0..n).map(|i| (1.3 * i as f64 + 0.7).sin() + 0.1).collect()
}

/// `Σ probe_i · y_i`.
pub fn probe_loss(y: &Tensor<f64>) -> Result<Tensor<f64>> {
    let r = Tensor::new(y.shape().to_vec(), probe(y.numel()))?;
    Ok(y.mul(&r)?.sum())
}

struct Suite {
    checks: Vec<NamedCheck>,
}

impl Suite {
    fn record(&mut self, name: &str, input_names: &[String], reports: Vec<GradReport>) {
        for (input, r) in input_names.iter().zip(reports) {
            self.checks.push(NamedCheck {
                name: format!("{name}/{input}"),
                coords: r.coords,
                max_rel_err: r.max_rel_err,
                tol: r.tol,
                passed: r.passed,
            });
        }
    }

    fn run<F>(&mut self, name: &str, inputs: Vec<(&str, Vec<usize>, Vec<f64>)>, eps: f64, tol: f64, f: F) -> Result<()>
    where
        F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    {
        let names: Vec<String> = inputs.iter().map(|(n, _, _)| n.to_string()).collect();
        let data: Vec<(Vec<usize>, Vec<f64>)> = inputs.into_iter().map(|(_, s, d)| (s, d)).collect();
        let reports = finite_diff_check_multi(f, &data, eps, tol)?;
        self.record(name, &names, reports);
        Ok(())
    }

    fn finish(self, scope: GradScope) -> GradcheckReport {
        let passed = self.checks.iter().all(|c| c.passed);
        GradcheckReport {
            scope,
            checks: self.checks,
            passed,
        }
    }
}

fn randn(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Distinct values spaced far apart relative to the step, shuffled.
fn spaced(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| 0.05 * i as f64 - 0.025 * n as f64).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    v
}

fn sh(s: &[usize]) -> String {
    s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

/// Every tensor op the model uses, each on [`SHAPES_PER_OP`] random shapes.
pub fn check_ops(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Suite { checks: Vec::new() };
    let (eps, tol) = (OP_EPS, OP_TOL);
    for _ in 0..SHAPES_PER_OP {
        let (a, b, c) = (dims(&mut rng, 1, 4), dims(&mut rng, 1, 5), dims(&mut rng, 1, 4));
        let n = a * b;
        let x = randn(&mut rng, n, 1.0);
        let y = randn(&mut rng, n, 1.0);
        let shape = vec![a, b];
        let tag = sh(&shape);

        s.run(&format!("add[{tag}]"), vec![("a", shape.clone(), x.clone()), ("b", shape.clone(), y.clone())], eps, tol, |t| {
            probe_loss(&t[0].add(&t[1])?)
        })?;
        s.run(&format!("sub[{tag}]"), vec![("a", shape.clone(), x.clone()), ("b", shape.clone(), y.clone())], eps, tol, |t| {
            probe_loss(&t[0].sub(&t[1])?)
        })?;
        s.run(&format!("mul[{tag}]"), vec![("a", shape.clone(), x.clone()), ("b", shape.clone(), y.clone())], eps, tol, |t| {
            probe_loss(&t[0].mul(&t[1])?)
        })?;
        s.run(&format!("scale[{tag}]"), vec![("x", shape.clone(), x.clone())], eps, tol, |t| probe_loss(&t[0].scale(-1.7)))?;
        s.run(&format!("reshape[{tag}]"), vec![("x", shape.clone(), x.clone())], eps, tol, |t| {
            probe_loss(&t[0].reshape(vec![n])?)
        })?;
        s.run(&format!("gelu[{tag}]"), vec![("x", shape.clone(), x.clone())], eps, tol, |t| probe_loss(&t[0].gelu()))?;
        s.run(&format!("softmax[{tag}]"), vec![("x", shape.clone(), x.clone())], eps, tol, |t| {
            probe_loss(&t[0].softmax_lastdim())
        })?;
        s.run(&format!("sum[{tag}]"), vec![("x", shape.clone(), x.clone())], eps, tol, |t| {
            Ok(t[0].sum().scale(0.5))
        })?;
        s.run(&format!("mean_leading[{tag}]"), vec![("x", shape.clone(), x.clone())], eps, tol, |t| {
            probe_loss(&t[0].mean_leading()?)
        })?;
        s.run(&format!("transpose[{tag}]"), vec![("x", shape.clone(), x.clone())], eps, tol, |t| {
            probe_loss(&t[0].transpose_last2()?)
        })?;
        s.run(
            &format!("layer_norm[{tag}]"),
            vec![
                ("x", shape.clone(), randn(&mut rng, n, 1.0)),
                ("gamma", vec![b], randn(&mut rng, b, 1.0)),
                ("beta", vec![b], randn(&mut rng, b, 1.0)),
            ],
            eps,
            tol,
            |t| probe_loss(&t[0].layer_norm(&t[1], &t[2], LN_EPS)?),
        )?;
        let label = rng.random_range(0..n);
        s.run(&format!("cross_entropy[{n}]"), vec![("logits", vec![n], x.clone())], eps, tol, |t| {
            t[0].cross_entropy(label)
        })?;
        s.run(
            &format!("add_broadcast[{a}x{b}x{c}+{c}]"),
            vec![("x", vec![a, b, c], randn(&mut rng, a * b * c, 1.0)), ("b", vec![c], randn(&mut rng, c, 1.0))],
            eps,
            tol,
            |t| probe_loss(&t[0].add_broadcast(&t[1])?),
        )?;
        s.run(
            &format!("matmul[{a}x{b}x{c}*{c}x{a}]"),
            vec![("x", vec![a, b, c], randn(&mut rng, a * b * c, 1.0)), ("w", vec![c, a], randn(&mut rng, c * a, 1.0))],
            eps,
            tol,
            |t| probe_loss(&t[0].matmul(&t[1])?),
        )?;
        for transpose in [false, true] {
            let rhs = if transpose { vec![a, c, b] } else { vec![a, b, c] };
            s.run(
                &format!("bmm{}[{a}x{c}x{b}*{}]", if transpose { "_t" } else { "" }, sh(&rhs)),
                vec![("lhs", vec![a, c, b], randn(&mut rng, a * b * c, 1.0)), ("rhs", rhs, randn(&mut rng, a * b * c, 1.0))],
                eps,
                tol,
                |t| probe_loss(&t[0].bmm(&t[1], transpose)?),
            )?;
        }
        let out = dims(&mut rng, 1, 2 * n);
        let idx: Vec<Option<usize>> = (0..out)
            .map(|_| (rng.random_range(0..4) != 0).then(|| rng.random_range(0..n)))
            .collect();
        let idx = Rc::new(idx);
        s.run(&format!("gather[{n}->{out}]"), vec![("x", vec![n], x.clone())], eps, tol, |t| {
            probe_loss(&t[0].gather(idx.clone(), vec![out])?)
        })?;

        let (h, w) = (dims(&mut rng, 1, 5), dims(&mut rng, 1, 5));
        let groups = dims(&mut rng, 1, 3);
        let (cin, per_out) = (groups * dims(&mut rng, 1, 2), dims(&mut rng, 1, 2));
        let cout = groups * per_out;
        let grouping = ChannelGrouping::standard(cin, groups)?;
        s.run(
            &format!("conv2d[{cin}x{h}x{w},g{groups}->{cout}]"),
            vec![
                ("x", vec![cin, h, w], randn(&mut rng, cin * h * w, 1.0)),
                ("w", vec![cout, cin / groups, 3, 3], randn(&mut rng, cout * cin / groups * 9, 1.0)),
                ("b", vec![cout], randn(&mut rng, cout, 1.0)),
            ],
            eps,
            tol,
            |t| probe_loss(&t[0].conv2d(&t[1], Some(&t[2]), grouping)?),
        )?;
        let overlap = ChannelGrouping {
            groups: 2,
            in_stride: 1,
            in_span: cin,
        };
        s.run(
            &format!("conv2d_overlap[{cin}x{h}x{w}]"),
            vec![
                ("x", vec![cin, h, w], randn(&mut rng, cin * h * w, 1.0)),
                ("w", vec![2, cin, 3, 3], randn(&mut rng, 2 * cin * 9, 1.0)),
            ],
            eps,
            tol,
            |t| probe_loss(&t[0].conv2d(&t[1], None, overlap)?),
        )?;
        s.run(
            &format!("maxpool2d[{cin}x{h}x{w}]"),
            vec![("x", vec![cin, h, w], spaced(&mut rng, cin * h * w))],
            eps,
            tol,
            |t| probe_loss(&t[0].maxpool2d(3, 2, 1)?),
        )?;
    }
    Ok(s.finish(GradScope::Ops))
}

fn param_inputs<P: ParamSet<f64>>(p: &P) -> Vec<(&str, Vec<usize>, Vec<f64>)> {
    p.params()
        .into_iter()
        .map(|p| (p.name.as_str(), p.shape.clone(), p.data.clone()))
        .collect()
}

fn preset<P: ParamSet<f64>>(p: &P, leaves: &[Tensor<f64>]) -> Binder<f64> {
    Binder::preset(p.params().iter().map(|p| p.name.clone()).zip(leaves.iter().cloned()))
}

/// Randomises every parameter so biases, tables and norm gains are all
/// exercised away from their initial values.
fn jitter<P: ParamSet<f64>>(p: &mut P, rng: &mut ChaCha8Rng, std: f64) {
    for param in p.params_mut() {
        let noise = randn(rng, param.numel(), std);
        param.data.iter_mut().zip(noise).for_each(|(v, n)| *v += n);
    }
}

/// Attention block (every variant, with and without window padding),
/// embedding and aggregation, w.r.t. inputs and every parameter tensor.
pub fn check_block(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Suite { checks: Vec::new() };
    let (groups, c) = (2, 2);
    let dim = groups * c;
    let cases = [((4, 4), (4, 4)), ((3, 5), (2, 2))];
    for (grid, window) in cases {
        let layout = WindowLayout::new(grid, window)?;
        for variant in BlockVariant::ALL {
            if grid != (4, 4) && variant != BlockVariant::Edsa {
                continue;
            }
            let mut params = EdsaParams::<f64>::init("", dim, groups, window, &mut Initializer::new(seed, 0.3))?;
            jitter(&mut params, &mut rng, 0.3);
            let n = layout.tokens() * dim;
            let mut inputs = vec![
                ("spatial", vec![layout.tokens(), dim], randn(&mut rng, n, 1.0)),
                ("group", vec![layout.tokens(), dim], randn(&mut rng, n, 1.0)),
            ];
            inputs.extend(param_inputs(&params));
            s.run(
                &format!("edsa_{variant}[grid {}, window {}]", sh(&[grid.0, grid.1]), sh(&[window.0, window.1])),
                inputs,
                SMOOTH_EPS,
                BLOCK_TOL,
                |t| {
                    let state = EdsaState {
                        spatial: t[0].clone(),
                        group: t[1].clone(),
                    };
                    let out = edsa_block_forward(&state, &params, &layout, variant, &preset(&params, &t[2..]))?;
                    probe_loss(&out.spatial)?.add(&probe_loss(&out.group.scale(0.5))?)
                },
            )?;
        }
    }

    let gte = GteConfig::new(2, 2, 4, 8)?;
    let mut gp = GteParams::<f64>::init(&gte, &mut Initializer::new(seed, 0.3))?;
    jitter(&mut gp, &mut rng, 0.1);
    let grid = (3, 3);
    let mut inputs = vec![("rep", vec![9, gte.rep_channels()], randn(&mut rng, 9 * gte.rep_channels(), 1.0))];
    inputs.extend(param_inputs(&gp));
    s.run("group_token_embed[grid 3x3, K2 P2 G4 C2]", inputs, SMOOTH_EPS, BLOCK_TOL, |t| {
        probe_loss(&group_token_embed_tensor(&t[0], grid, &gp, &gte, &preset(&gp, &t[1..]))?)
    })?;

    let geom = GtaGeometry::new(4, 2)?;
    let mut ap = GtaParams::<f64>::init("", &geom, &mut Initializer::new(seed, 0.3));
    jitter(&mut ap, &mut rng, 0.3);
    let grid = (6, 6);
    let mut inputs = vec![("x", vec![36, 8], spaced(&mut rng, 36 * 8))];
    inputs.extend(param_inputs(&ap));
    s.run("gta[grid 6x6, G4 C2]", inputs, POOLED_EPS, BLOCK_TOL, |t| {
        probe_loss(&gta_forward(&t[0], grid, &geom, &ap, &preset(&ap, &t[1..]))?.0)
    })?;
    Ok(s.finish(GradScope::Block))
}

/// Cross-entropy of the micro model w.r.t. every parameter tensor.
pub fn check_model(seed: u64) -> Result<GradcheckReport> {
    check_model_config(&GetConfig::micro(), seed)
}

pub fn check_model_config(cfg: &GetConfig, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = build_model::<f64>(cfg)?;
    jitter(&mut params, &mut rng, 0.2);
    let (stream, label) = toy_dataset(seed, 1, cfg).remove(0);
    let rep = encode_stream(&stream, cfg)?;
    let mut s = Suite { checks: Vec::new() };
    s.run("model", param_inputs(&params), POOLED_EPS, MODEL_TOL, |t| {
        forward_logits(&rep, &params, cfg, &preset(&params, t))?.cross_entropy(label)
    })?;
    Ok(s.finish(GradScope::Model))
}

pub fn cmd_gradcheck(scope: GradScope, seed: u64) -> Result<GradcheckReport> {
    match scope {
        GradScope::Ops => check_ops(seed),
        GradScope::Block => check_block(seed),
        GradScope::Model => check_model(seed),
    }
}
