//! Central finite-difference comparison against the reverse-mode gradient.
//!
//! The numeric derivative uses the five-point stencil
//! `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`, whose truncation error
//! is O(h⁴) instead of O(h²).

use serde::Serialize;

use super::Tensor;
use crate::error::Result;

/// Outcome of checking one input tensor.
#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub coords: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: Option<usize>,
    pub tol: f64,
    pub passed: bool,
}

/// Relative errors use `max(|analytic|, |numeric|, REL_FLOOR)` as denominator
/// so coordinates whose true gradient is zero are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

/// Checks `f` (scalar-valued) w.r.t. a single input.
pub fn finite_diff_check<F>(f: F, x: &[f64], shape: &[usize], eps: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let reports = finite_diff_check_multi(
        |xs: &[Tensor<f64>]| f(&xs[0]),
        &[(shape.to_vec(), x.to_vec())],
        eps,
        tol,
    )?;
    Ok(reports.into_iter().next().unwrap())
}

/// Checks `f` w.r.t. every input; one report per input, in order.
pub fn finite_diff_check_multi<F>(
    f: F,
    inputs: &[(Vec<usize>, Vec<f64>)],
    eps: f64,
    tol: f64,
) -> Result<Vec<GradReport>>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves = inputs
        .iter()
        .map(|(s, d)| Tensor::param(s.clone(), d.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&leaves)?;
    loss.backward()?;

    let constants = |k: usize, i: usize, delta: f64| -> Result<Vec<Tensor<f64>>> {
        inputs
            .iter()
            .enumerate()
            .map(|(j, (s, d))| {
                let mut d = d.clone();
                if j == k {
                    d[i] += delta;
                }
                Tensor::new(s.clone(), d)
            })
            .collect()
    };

    let mut reports = Vec::with_capacity(inputs.len());
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let mut rep = GradReport {
            coords: leaf.numel(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: None,
            tol,
            passed: true,
        };
        for (i, a) in analytic.iter().enumerate() {
            let at = |delta: f64| -> Result<f64> { Ok(f(&constants(k, i, delta)?)?.item()) };
            let near = at(eps)? - at(-eps)?;
            let far = at(2.0 * eps)? - at(-2.0 * eps)?;
            let numeric = (8.0 * near - far) / (12.0 * eps);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if !rel.is_finite() || rel > rep.max_rel_err {
                rep.max_rel_err = if rel.is_finite() { rel } else { f64::INFINITY };
                rep.worst_index = Some(i);
            }
            rep.max_abs_err = rep.max_abs_err.max(abs);
        }
        rep.passed = rep.max_rel_err < tol;
        reports.push(rep);
    }
    Ok(reports)
}
