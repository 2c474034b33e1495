//! Layout helpers and small composite layers built from tensor ops.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Epsilon of every layer normalisation in the model.
pub const LN_EPS: f64 = 1e-5;

/// `[N, C]` token-major to `[C, h, w]` channel-first.
pub fn tokens_to_planes<T: Element>(x: &Tensor<T>, grid: (usize, usize)) -> Result<Tensor<T>> {
    let (h, w) = grid;
    check_tokens(x, h * w)?;
    let c = x.shape()[1];
    x.transpose_last2()?.reshape(vec![c, h, w])
}

/// `[C, h, w]` channel-first to `[h*w, C]` token-major.
pub fn planes_to_tokens<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::ShapeMismatch(format!("expected [C,h,w], got {:?}", x.shape())));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    x.reshape(vec![c, h * w])?.transpose_last2()
}

pub(crate) fn check_tokens<T: Element>(x: &Tensor<T>, tokens: usize) -> Result<()> {
    if x.rank() != 2 || x.shape()[0] != tokens {
        return Err(Error::ShapeMismatch(format!(
            "expected {tokens} tokens as [N, C], got {:?}",
            x.shape()
        )));
    }
    Ok(())
}

/// `x·w + b` over the last axis.
pub fn linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let y = x.matmul(w)?;
    match b {
        Some(b) => y.add_broadcast(b),
        None => Ok(y),
    }
}

/// Per-group linear map: `[N, G*c_in]` with weights `[G, c_in, c_out]` and
/// bias `[G*c_out]` to `[N, G*c_out]`. Groups never mix.
pub fn grouped_linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 || w.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "grouped_linear: x {:?}, w {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (n, width) = (x.shape()[0], x.shape()[1]);
    let (groups, c_in, c_out) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if groups * c_in != width || b.shape() != [groups * c_out] {
        return Err(Error::GroupMismatch(format!(
            "grouped_linear: width {width} vs {groups} groups of {c_in}, bias {:?}",
            b.shape()
        )));
    }
    let split: Vec<Option<usize>> = (0..groups)
        .flat_map(|g| (0..n).flat_map(move |t| (0..c_in).map(move |c| Some(t * width + g * c_in + c))))
        .collect();
    let xg = x.gather(Rc::new(split), vec![groups, n, c_in])?;
    let yg = xg.bmm(w, false)?;
    let merge: Vec<Option<usize>> = (0..n)
        .flat_map(|t| (0..groups).flat_map(move |g| (0..c_out).map(move |c| Some((g * n + t) * c_out + c))))
        .collect();
    yg.gather(Rc::new(merge), vec![n, groups * c_out])?.add_broadcast(b)
}
