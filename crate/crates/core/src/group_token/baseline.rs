//! Reference encoders for the conversion benchmark.

use rayon::prelude::*;

use super::encode::shard_ranges;
use crate::error::{Error, Result};
use crate::events::{validate_stream, EventStream};
use crate::tensor::Tensor;

fn sharded<F>(stream: &EventStream, len: usize, workers: usize, shard: F) -> Result<Vec<f32>>
where
    F: Fn(std::ops::Range<usize>, &mut [f32]) -> Result<()> + Sync,
{
    let ranges = shard_ranges(stream.len(), workers);
    if ranges.len() == 1 {
        let mut out = vec![0.0; len];
        shard(ranges[0].clone(), &mut out)?;
        return Ok(out);
    }
    let parts: Vec<Result<Vec<f32>>> = ranges
        .into_par_iter()
        .map(|r| {
            let mut local = vec![0.0; len];
            shard(r, &mut local)?;
            Ok(local)
        })
        .collect();
    let mut parts = parts.into_iter();
    let mut acc = parts.next().unwrap()?;
    for part in parts {
        acc.iter_mut().zip(part?).for_each(|(a, b)| *a += b);
    }
    Ok(acc)
}

fn bad_event(stream: &EventStream, i: usize) -> Error {
    validate_stream(stream).err().unwrap_or(Error::OutOfRange {
        index: i,
        reason: "invalid event".into(),
    })
}

/// Per-pixel polarity counts, `[H, W, 2]` with index `(y·W + x)·2 + p`.
pub fn encode_event_histogram(stream: &EventStream, workers: usize) -> Result<Tensor<f32>> {
    let (w, h) = (stream.width as usize, stream.height as usize);
    let data = sharded(stream, h * w * 2, workers, |range, out| {
        for i in range {
            let (p, x, y) = (stream.p[i] as usize, stream.x[i] as usize, stream.y[i] as usize);
            if p > 1 || x >= w || y >= h {
                return Err(bad_event(stream, i));
            }
            out[(y * w + x) * 2 + p] += 1.0;
        }
        Ok(())
    })?;
    Tensor::new(vec![h, w, 2], data)
}

/// Voxel grid `[H, W, K]` with index `(y·W + x)·K + bin`: each event adds its
/// signed polarity (±1) to the two time bins around
/// `(K−1)(t−t₀)/(t_end−t₀)`, weighted linearly.
pub fn encode_voxel_grid(stream: &EventStream, k: usize, workers: usize) -> Result<Tensor<f32>> {
    if k == 0 {
        return Err(Error::Config("voxel grid needs K >= 1".into()));
    }
    let (w, h) = (stream.width as usize, stream.height as usize);
    let (t0, t_end) = stream.time_span().unwrap_or((0, 0));
    let scale = if t_end > t0 {
        (k - 1) as f64 / (t_end - t0) as f64
    } else {
        0.0
    };
    let data = sharded(stream, h * w * k, workers, |range, out| {
        for i in range {
            let (p, x, y) = (stream.p[i], stream.x[i] as usize, stream.y[i] as usize);
            if p > 1 || x >= w || y >= h || stream.t[i] < t0 {
                return Err(bad_event(stream, i));
            }
            let tn = (stream.t[i] - t0) as f64 * scale;
            let lo = (tn as usize).min(k - 1);
            let frac = (tn - lo as f64) as f32;
            let pol = if p == 1 { 1.0f32 } else { -1.0 };
            let base = (y * w + x) * k;
            out[base + lo] += pol * (1.0 - frac);
            if lo + 1 < k {
                out[base + lo + 1] += pol * frac;
            }
        }
        Ok(())
    })?;
    Tensor::new(vec![h, w, k], data)
}
