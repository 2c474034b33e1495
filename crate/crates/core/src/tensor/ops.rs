use std::rc::Rc;

use super::{numel, Element, Tensor};
use crate::error::{Error, Result};

/// Dense product `A·B` with `A` logically `m×k` and `B` logically `k×n`.
/// `ta`/`tb` mean the operand is stored transposed. Accumulates in f64.
pub(crate) fn gemm<T: Element>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) -> Vec<T> {
    let a_at = |i: usize, p: usize| if ta { a[p * m + i] } else { a[i * k + p] };
    let mut out = Vec::with_capacity(m * n);
    if tb {
        for i in 0..m {
            for j in 0..n {
                let row = &b[j * k..(j + 1) * k];
                let mut acc = 0.0f64;
                for (p, bv) in row.iter().enumerate() {
                    acc += a_at(i, p).wide() * bv.wide();
                }
                out.push(T::cast(acc));
            }
        }
    } else {
        let mut acc = vec![0.0f64; n];
        for i in 0..m {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for p in 0..k {
                let av = a_at(i, p).wide();
                for (o, bv) in acc.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *o += av * bv.wide();
                }
            }
            out.extend(acc.iter().map(|&v| T::cast(v)));
        }
    }
    out
}

fn shape_err(msg: String) -> Error {
    Error::ShapeMismatch(msg)
}

fn zip_map<T: Element>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Element> Tensor<T> {
    fn check_same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(format!(
                "{op}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        let data = zip_map(self.data(), other.data(), |a, b| a + b);
        let (na, nb) = (self.requires_grad(), other.requires_grad());
        Ok(Self::from_op(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |g| vec![na.then(|| g.to_vec()), nb.then(|| g.to_vec())],
        ))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        let data = zip_map(self.data(), other.data(), |a, b| a - b);
        let (na, nb) = (self.requires_grad(), other.requires_grad());
        Ok(Self::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                vec![
                    na.then(|| g.to_vec()),
                    nb.then(|| g.iter().map(|&v| -v).collect()),
                ]
            },
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "mul")?;
        let data = zip_map(self.data(), other.data(), |a, b| a * b);
        let (a, b) = (self.clone(), other.clone());
        Ok(Self::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                vec![
                    a.requires_grad().then(|| zip_map(g, b.data(), |g, y| g * y)),
                    b.requires_grad().then(|| zip_map(g, a.data(), |g, x| g * x)),
                ]
            },
        ))
    }

    pub fn scale(&self, c: f64) -> Self {
        let c = T::cast(c);
        let data = self.data().iter().map(|&v| v * c).collect();
        Self::from_op("scale", self.shape().to_vec(), data, vec![self.clone()], move |g| {
            vec![Some(g.iter().map(|&v| v * c).collect())]
        })
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.numel() {
            return Err(shape_err(format!(
                "reshape {:?} -> {shape:?}",
                self.shape()
            )));
        }
        Ok(Self::from_op(
            "reshape",
            shape,
            self.to_vec(),
            vec![self.clone()],
            |g| vec![Some(g.to_vec())],
        ))
    }

    /// Adds `b`, whose shape must equal the trailing dims of `self`, to every
    /// leading slice.
    pub fn add_broadcast(&self, b: &Self) -> Result<Self> {
        let r = b.rank();
        if r > self.rank() || self.shape()[self.rank() - r..] != *b.shape() {
            return Err(shape_err(format!(
                "add_broadcast: {:?} + {:?}",
                self.shape(),
                b.shape()
            )));
        }
        let inner = b.numel().max(1);
        let data: Vec<T> = self
            .data()
            .chunks(inner)
            .flat_map(|row| row.iter().zip(b.data()).map(|(&x, &y)| x + y))
            .collect();
        let (na, nb) = (self.requires_grad(), b.requires_grad());
        Ok(Self::from_op(
            "add_broadcast",
            self.shape().to_vec(),
            data,
            vec![self.clone(), b.clone()],
            move |g| {
                let gb = nb.then(|| {
                    let mut acc = vec![0.0f64; inner];
                    for row in g.chunks(inner) {
                        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v.wide());
                    }
                    acc.into_iter().map(T::cast).collect()
                });
                vec![na.then(|| g.to_vec()), gb]
            },
        ))
    }

    /// `[..., k] x [k, n] -> [..., n]`; leading dims are flattened into rows.
    pub fn matmul(&self, w: &Self) -> Result<Self> {
        if self.rank() < 1 || w.rank() != 2 || *self.shape().last().unwrap() != w.shape()[0] {
            return Err(shape_err(format!(
                "matmul: {:?} x {:?}",
                self.shape(),
                w.shape()
            )));
        }
        let k = w.shape()[0];
        let n = w.shape()[1];
        let m = self.numel() / k.max(1);
        let data = gemm(self.data(), w.data(), m, k, n, false, false);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let (a, b) = (self.clone(), w.clone());
        Ok(Self::from_op("matmul", shape, data, vec![self.clone(), w.clone()], move |g| {
            vec![
                a.requires_grad().then(|| gemm(g, b.data(), m, n, k, false, true)),
                b.requires_grad().then(|| gemm(a.data(), g, k, m, n, true, false)),
            ]
        }))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]` (or `[B, n, k]` when
    /// `transpose_rhs`).
    pub fn bmm(&self, rhs: &Self, transpose_rhs: bool) -> Result<Self> {
        let bad = || shape_err(format!("bmm: {:?} x {:?}", self.shape(), rhs.shape()));
        if self.rank() != 3 || rhs.rank() != 3 || self.shape()[0] != rhs.shape()[0] {
            return Err(bad());
        }
        let (batch, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (rk, n) = if transpose_rhs {
            (rhs.shape()[2], rhs.shape()[1])
        } else {
            (rhs.shape()[1], rhs.shape()[2])
        };
        if rk != k {
            return Err(bad());
        }
        let (sa, sb, so) = (m * k, k * n, m * n);
        let mut data = Vec::with_capacity(batch * so);
        for i in 0..batch {
            data.extend(gemm(
                &self.data()[i * sa..(i + 1) * sa],
                &rhs.data()[i * sb..(i + 1) * sb],
                m,
                k,
                n,
                false,
                transpose_rhs,
            ));
        }
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Self::from_op(
            "bmm",
            vec![batch, m, n],
            data,
            vec![self.clone(), rhs.clone()],
            move |g| {
                let ga = a.requires_grad().then(|| {
                    let mut out = Vec::with_capacity(batch * sa);
                    for i in 0..batch {
                        let gi = &g[i * so..(i + 1) * so];
                        let bi = &b.data()[i * sb..(i + 1) * sb];
                        // dA = G·Bᵀ, B stored k×n (or n×k when transposed)
                        out.extend(gemm(gi, bi, m, n, k, false, !transpose_rhs));
                    }
                    out
                });
                let gb = b.requires_grad().then(|| {
                    let mut out = Vec::with_capacity(batch * sb);
                    for i in 0..batch {
                        let gi = &g[i * so..(i + 1) * so];
                        let ai = &a.data()[i * sa..(i + 1) * sa];
                        if transpose_rhs {
                            // d(Bᵀ) stored n×k: Gᵀ·A
                            out.extend(gemm(gi, ai, n, m, k, true, false));
                        } else {
                            out.extend(gemm(ai, gi, k, m, n, true, false));
                        }
                    }
                    out
                });
                vec![ga, gb]
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(shape_err(format!("transpose of rank-{r} tensor")));
        }
        let (m, n) = (self.shape()[r - 2], self.shape()[r - 1]);
        let batch = self.numel() / (m * n).max(1);
        let idx: Vec<Option<usize>> = (0..batch)
            .flat_map(|b| (0..n).flat_map(move |j| (0..m).map(move |i| Some(b * m * n + i * n + j))))
            .collect();
        let mut shape = self.shape().to_vec();
        shape.swap(r - 2, r - 1);
        self.gather(Rc::new(idx), shape)
    }

    /// `out[i] = self[idx[i]]`, or zero where `idx[i]` is `None`. The backward
    /// pass scatter-adds, so repeated indices accumulate.
    pub fn gather(&self, idx: Rc<Vec<Option<usize>>>, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != idx.len() {
            return Err(shape_err(format!(
                "gather: {} indices for shape {shape:?}",
                idx.len()
            )));
        }
        let src = self.data();
        if let Some(bad) = idx.iter().flatten().find(|&&i| i >= src.len()) {
            return Err(Error::IndexOutOfRange {
                index: *bad,
                bins: src.len(),
            });
        }
        let data = idx
            .iter()
            .map(|i| i.map_or(T::zero(), |i| src[i]))
            .collect();
        let n_src = src.len();
        Ok(Self::from_op("gather", shape, data, vec![self.clone()], move |g| {
            let mut out = vec![T::zero(); n_src];
            for (gi, i) in g.iter().zip(idx.iter()) {
                if let Some(i) = *i {
                    out[i] = out[i] + *gi;
                }
            }
            vec![Some(out)]
        }))
    }

    /// Numerically stable softmax along the last axis.
    pub fn softmax_lastdim(&self) -> Self {
        let d = self.shape().last().copied().unwrap_or(1).max(1);
        let mut data = Vec::with_capacity(self.numel());
        for row in self.data().chunks(d) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.wide()));
            let exps: Vec<f64> = row.iter().map(|v| (v.wide() - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| T::cast(e / z)));
        }
        let y = data.clone();
        Self::from_op("softmax", self.shape().to_vec(), data, vec![self.clone()], move |g| {
            let mut out = Vec::with_capacity(g.len());
            for (gr, yr) in g.chunks(d).zip(y.chunks(d)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a.wide() * b.wide()).sum();
                out.extend(
                    gr.iter()
                        .zip(yr)
                        .map(|(gv, yv)| T::cast(yv.wide() * (gv.wide() - dot))),
                );
            }
            vec![Some(out)]
        })
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Self, beta: &Self, eps: f64) -> Result<Self> {
        let d = self.shape().last().copied().unwrap_or(0);
        if d == 0 || gamma.shape() != [d] || beta.shape() != [d] {
            return Err(shape_err(format!(
                "layer_norm: x {:?}, gamma {:?}, beta {:?}",
                self.shape(),
                gamma.shape(),
                beta.shape()
            )));
        }
        let rows = self.numel() / d;
        let mut xhat = Vec::with_capacity(self.numel());
        let mut inv_std = Vec::with_capacity(rows);
        for row in self.data().chunks(d) {
            // shifted by the first element so constant rows centre exactly
            let shift = row[0].wide();
            let mean_dev = row.iter().map(|v| v.wide() - shift).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|v| {
                    let c = v.wide() - shift - mean_dev;
                    c * c
                })
                .sum::<f64>()
                / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|v| (v.wide() - shift - mean_dev) * is));
        }
        let data = xhat
            .chunks(d)
            .flat_map(|r| {
                r.iter()
                    .zip(gamma.data().iter().zip(beta.data()))
                    .map(|(xh, (g, b))| T::cast(xh * g.wide() + b.wide()))
            })
            .collect();
        let (x, gm, bt) = (self.clone(), gamma.clone(), beta.clone());
        Ok(Self::from_op(
            "layer_norm",
            self.shape().to_vec(),
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g| {
                let mut dgamma = vec![0.0f64; d];
                let mut dbeta = vec![0.0f64; d];
                let mut dx = Vec::with_capacity(g.len());
                for ((gr, xr), &is) in g.chunks(d).zip(xhat.chunks(d)).zip(&inv_std) {
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        let gv = gr[j].wide();
                        dgamma[j] += gv * xr[j];
                        dbeta[j] += gv;
                        let dxh = gv * gm.data()[j].wide();
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xr[j];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    if x.requires_grad() {
                        dx.extend((0..d).map(|j| {
                            let dxh = gr[j].wide() * gm.data()[j].wide();
                            T::cast(is * (dxh - mean_dxh - xr[j] * mean_dxh_xh))
                        }));
                    }
                }
                vec![
                    x.requires_grad().then_some(dx),
                    gm.requires_grad().then(|| dgamma.into_iter().map(T::cast).collect()),
                    bt.requires_grad().then(|| dbeta.into_iter().map(T::cast).collect()),
                ]
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Self {
        let data = self
            .data()
            .iter()
            .map(|v| {
                let x = v.wide();
                T::cast(0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            })
            .collect();
        let x = self.clone();
        Self::from_op("gelu", self.shape().to_vec(), data, vec![self.clone()], move |g| {
            let out = g
                .iter()
                .zip(x.data())
                .map(|(gv, xv)| {
                    let x = xv.wide();
                    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                    let d = 0.5 * (1.0 + th)
                        + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    T::cast(gv.wide() * d)
                })
                .collect();
            vec![Some(out)]
        })
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Self {
        let s: f64 = self.data().iter().map(|v| v.wide()).sum();
        let n = self.numel();
        Self::from_op("sum", vec![], vec![T::cast(s)], vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    /// Mean over every axis but the last: `[..., d] -> [d]`.
    pub fn mean_leading(&self) -> Result<Self> {
        let d = self.shape().last().copied().unwrap_or(0);
        if d == 0 {
            return Err(shape_err(format!("mean_leading of {:?}", self.shape())));
        }
        let rows = self.numel() / d;
        let mut acc = vec![0.0f64; d];
        for row in self.data().chunks(d) {
            acc.iter_mut().zip(row).for_each(|(a, v)| *a += v.wide());
        }
        let inv = 1.0 / rows.max(1) as f64;
        let data = acc.iter().map(|a| T::cast(a * inv)).collect();
        let n = self.numel();
        Ok(Self::from_op("mean_leading", vec![d], data, vec![self.clone()], move |g| {
            vec![Some((0..n).map(|i| T::cast(g[i % d].wide() * inv)).collect())]
        }))
    }

    /// Cross-entropy of a logit vector against a class index.
    pub fn cross_entropy(&self, label: usize) -> Result<Self> {
        let n = self.numel();
        if label >= n {
            return Err(shape_err(format!("label {label} for {n} logits")));
        }
        let z: Vec<f64> = self.data().iter().map(|v| v.wide()).collect();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - z[label];
        Ok(Self::from_op(
            "cross_entropy",
            vec![],
            vec![T::cast(loss)],
            vec![self.clone()],
            move |g| {
                let out = z
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let p = (v - lse).exp() - if i == label { 1.0 } else { 0.0 };
                        T::cast(g[0].wide() * p)
                    })
                    .collect();
                vec![Some(out)]
            },
        ))
    }
}

/// Softmax of a plain vector (no graph).
pub fn softmax<T: Element>(logits: &[T]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.wide()));
    let e: Vec<f64> = logits.iter().map(|v| (v.wide() - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}
