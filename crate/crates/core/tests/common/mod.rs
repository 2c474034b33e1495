//! Independent reference implementations shared by the integration tests.
//! Everything here is written as plain loops over `Vec<f64>` and never calls
//! into the library's tensor code.

#![allow(dead_code)]

use get_core::events::EventStream;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sorted random stream with duplicate timestamps and a random time origin.
pub fn random_stream(rng: &mut ChaCha8Rng, n: usize, width: u32, height: u32) -> EventStream {
    let t0: u64 = rng.random_range(0..1_000_000);
    let span: u64 = rng.random_range(0..5_000);
    let mut t: Vec<u64> = (0..n).map(|_| t0 + rng.random_range(0..=span)).collect();
    t.sort_unstable();
    EventStream {
        t,
        p: (0..n).map(|_| rng.random_range(0..2u8)).collect(),
        x: (0..n).map(|_| rng.random_range(0..width) as u16).collect(),
        y: (0..n).map(|_| rng.random_range(0..height) as u16).collect(),
        width,
        height,
    }
}

pub fn randn(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect()
}

/// Per-event loop writing straight into the `[tokens, 2K·2P²]` layout.
/// Returns `(grid, channels, counts-and-weights)`.
pub fn oracle_group_tokens(s: &EventStream, k: usize, p: usize) -> ((usize, usize), usize, Vec<f64>) {
    let w = (s.width as usize).div_ceil(p) * p;
    let h = (s.height as usize).div_ceil(p) * p;
    let grid = (h / p, w / p);
    let pp = p * p;
    let channels = 2 * k * 2 * pp;
    let mut out = vec![0.0; grid.0 * grid.1 * channels];
    if s.t.is_empty() {
        return (grid, channels, out);
    }
    let t0 = s.t[0];
    let t_end = *s.t.last().unwrap();
    for i in 0..s.t.len() {
        let dt = s.t[i] - t0;
        let bin = (k as u128 * dt as u128 / (t_end - t0 + 1) as u128) as usize;
        let (x, y) = (s.x[i] as usize, s.y[i] as usize);
        let rank = x % p + (y % p) * p;
        let token = x / p + (y / p) * (w / p);
        let cell = s.p[i] as usize * k + bin;
        let base = token * channels + cell * 2 * pp;
        out[base + rank] += 1.0;
        if t_end > t0 {
            out[base + pp + rank] += dt as f64 / (t_end - t0) as f64;
        }
    }
    (grid, channels, out)
}

/// `y = x·W` for row-major `x [n, a]`, `W [a, b]`.
pub fn matmul(x: &[f64], w: &[f64], n: usize, a: usize, b: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * b];
    for i in 0..n {
        for j in 0..b {
            let mut acc = 0.0;
            for c in 0..a {
                acc += x[i * a + c] * w[c * b + j];
            }
            y[i * b + j] = acc;
        }
    }
    y
}

pub fn softmax_rows(z: &mut [f64], cols: usize) {
    for row in z.chunks_mut(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Token attention for one window, `x [s, d]`, `bias [s, s]`. Rows whose
/// `valid` flag is false are excluded as keys and produce zero output.
pub fn oracle_ssa(x: &[f64], wq: &[f64], wk: &[f64], wv: &[f64], bias: &[f64], s: usize, d: usize, valid: &[bool]) -> Vec<f64> {
    let q = matmul(x, wq, s, d, d);
    let k = matmul(x, wk, s, d, d);
    let v = matmul(x, wv, s, d, d);
    let mut out = vec![0.0; s * d];
    for i in 0..s {
        if !valid[i] {
            continue;
        }
        let mut logits = vec![0.0; s];
        for j in 0..s {
            let mut dot = 0.0;
            for c in 0..d {
                dot += q[i * d + c] * k[j * d + c];
            }
            logits[j] = if valid[j] { dot / (d as f64).sqrt() + bias[i * s + j] } else { f64::NEG_INFINITY };
        }
        softmax_rows(&mut logits, s);
        for j in 0..s {
            for c in 0..d {
                out[i * d + c] += logits[j] * v[j * d + c];
            }
        }
    }
    out
}

/// Channel attention for one window: channels are the items, each described
/// by its `s` values. `w* [s, s]`, `bias [d, d]`.
pub fn oracle_gsa(x: &[f64], wq: &[f64], wk: &[f64], wv: &[f64], bias: &[f64], s: usize, d: usize, valid: &[bool]) -> Vec<f64> {
    let proj = |w: &[f64]| {
        let mut r = vec![0.0; d * s];
        for c in 0..d {
            for j in 0..s {
                let mut acc = 0.0;
                for u in 0..s {
                    acc += x[u * d + c] * w[u * s + j];
                }
                r[c * s + j] = acc;
            }
        }
        r
    };
    let (q, k, v) = (proj(wq), proj(wk), proj(wv));
    let mut out = vec![0.0; s * d];
    for c in 0..d {
        let mut logits = vec![0.0; d];
        for e in 0..d {
            let mut dot = 0.0;
            for j in 0..s {
                dot += q[c * s + j] * k[e * s + j];
            }
            logits[e] = dot / (s as f64).sqrt() + bias[c * d + e];
        }
        softmax_rows(&mut logits, d);
        for j in 0..s {
            if !valid[j] {
                continue;
            }
            for e in 0..d {
                out[j * d + c] += logits[e] * v[e * s + j];
            }
        }
    }
    out
}

pub fn layer_norm_rows(x: &[f64], gamma: &[f64], beta: &[f64], d: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (row, out) in x.chunks(d).zip(y.chunks_mut(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for c in 0..d {
            out[c] = (row[c] - mean) * inv * gamma[c] + beta[c];
        }
    }
    y
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Spatial offset table index for a window of `(wh, ww)`.
pub fn rpb_bias(table: &[f64], wh: usize, ww: usize) -> Vec<f64> {
    let s = wh * ww;
    let mut b = vec![0.0; s * s];
    for i in 0..s {
        for j in 0..s {
            let dr = (i / ww) as isize - (j / ww) as isize;
            let dc = (i % ww) as isize - (j % ww) as isize;
            let idx = (dr + wh as isize - 1) as usize * (2 * ww - 1) + (dc + ww as isize - 1) as usize;
            b[i * s + j] = table[idx];
        }
    }
    b
}

pub fn rgb_bias(table: &[f64], groups: usize, c: usize) -> Vec<f64> {
    let d = groups * c;
    let mut b = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            b[i * d + j] = table[(i / c) as usize + groups - 1 - j / c];
        }
    }
    b
}

/// Plain-value copy of one block's weights.
pub struct BlockWeights {
    pub n1g: Vec<f64>,
    pub n1b: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub gq: Vec<f64>,
    pub gk: Vec<f64>,
    pub gv: Vec<f64>,
    pub rpb: Vec<f64>,
    pub rgb: Vec<f64>,
    pub n2g: Vec<f64>,
    pub n2b: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Scripted dual-stream block on a `grid` token field with windows `win`
/// (padded windows allowed). Returns `(spatial, group)`.
pub fn oracle_edsa_block(
    fs: &[f64],
    fg: &[f64],
    w: &BlockWeights,
    grid: (usize, usize),
    win: (usize, usize),
    groups: usize,
) -> (Vec<f64>, Vec<f64>) {
    let d = w.n1g.len();
    let tokens = grid.0 * grid.1;
    let s = win.0 * win.1;
    let x: Vec<f64> = fs.iter().zip(fg).map(|(a, b)| a + b).collect();
    let xn = layer_norm_rows(&x, &w.n1g, &w.n1b, d);
    let bp = rpb_bias(&w.rpb, win.0, win.1);
    let bg = rgb_bias(&w.rgb, groups, d / groups);

    let mut a = vec![0.0; tokens * d];
    let mut g = vec![0.0; tokens * d];
    for wr in 0..grid.0.div_ceil(win.0) {
        for wc in 0..grid.1.div_ceil(win.1) {
            let mut src = vec![None; s];
            let mut xw = vec![0.0; s * d];
            for sr in 0..win.0 {
                for sc in 0..win.1 {
                    let (r, c) = (wr * win.0 + sr, wc * win.1 + sc);
                    if r < grid.0 && c < grid.1 {
                        let t = r * grid.1 + c;
                        src[sr * win.1 + sc] = Some(t);
                        xw[(sr * win.1 + sc) * d..][..d].copy_from_slice(&xn[t * d..][..d]);
                    }
                }
            }
            let valid: Vec<bool> = src.iter().map(Option::is_some).collect();
            let aw = oracle_ssa(&xw, &w.q, &w.k, &w.v, &bp, s, d, &valid);
            let gw = oracle_gsa(&aw, &w.gq, &w.gk, &w.gv, &bg, s, d, &valid);
            for (slot, t) in src.iter().enumerate() {
                if let Some(t) = t {
                    a[t * d..][..d].copy_from_slice(&aw[slot * d..][..d]);
                    g[t * d..][..d].copy_from_slice(&gw[slot * d..][..d]);
                }
            }
        }
    }
    let fs1: Vec<f64> = fs.iter().zip(&a).map(|(u, v)| u + v).collect();
    let fg1: Vec<f64> = fg.iter().zip(&g).map(|(u, v)| u + v).collect();
    let sum: Vec<f64> = fs1.iter().zip(&fg1).map(|(u, v)| u + v).collect();
    let h = layer_norm_rows(&sum, &w.n2g, &w.n2b, d);
    let hidden = w.b1.len();
    let mut z = matmul(&h, &w.w1, tokens, d, hidden);
    for (i, v) in z.iter_mut().enumerate() {
        *v = gelu(*v + w.b1[i % hidden]);
    }
    let m = matmul(&z, &w.w2, tokens, hidden, d);
    let fs2 = fs1.iter().zip(&m).enumerate().map(|(i, (u, v))| u + v + w.b2[i % d]).collect();
    (fs2, fg1)
}

/// Dense cross-correlation, zero padding `k/2`, of `x [cin, h, w]` with
/// `wt [cout, cin, k, k]`.
pub fn dense_conv(x: &[f64], wt: &[f64], cin: usize, h: usize, w: usize, cout: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let mut y = vec![0.0; cout * h * w];
    for o in 0..cout {
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for i in 0..cin {
                    for kr in 0..k {
                        for kc in 0..k {
                            let (rr, cc) = (r as isize + kr as isize - pad, c as isize + kc as isize - pad);
                            if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                                acc += x[(i * h + rr as usize) * w + cc as usize] * wt[((o * cin + i) * k + kr) * k + kc];
                            }
                        }
                    }
                }
                y[(o * h + r) * w + c] = acc;
            }
        }
    }
    y
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
