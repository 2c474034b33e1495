use rayon::prelude::*;

use super::{GroupRepresentation, GteConfig, TokenMode};
use crate::error::{Error, Result};
use crate::events::{validate_stream, EventStream};

/// Per-event discretised coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DiscreteEvents {
    pub d_t: Vec<u32>,
    pub pr: Vec<u32>,
    pub pos: Vec<u32>,
}

/// Output of the weighted bin-count: event counts and summed relative times.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DualBins {
    pub counts: Vec<u32>,
    pub time_sums: Vec<f64>,
}

/// `(t - t0) / (t_end - t0)`, defined as 0 when the stream has a single timestamp.
#[inline]
pub fn relative_time(t: u64, t0: u64, t_end: u64) -> f64 {
    if t_end == t0 {
        0.0
    } else {
        (t - t0) as f64 / (t_end - t0) as f64
    }
}

#[inline]
fn time_bin(t: u64, t0: u64, t_end: u64, k: usize) -> u32 {
    let num = k as u128 * u128::from(t - t0);
    (num / (u128::from(t_end - t0) + 1)) as u32
}

fn check_index_space(cfg: &GteConfig, width: u32, height: u32) -> Result<usize> {
    let bins = cfg.bins(width, height);
    if bins > u32::MAX as usize {
        return Err(Error::Config(format!(
            "{bins} bins exceed the 32-bit index space"
        )));
    }
    Ok(bins)
}

/// Time bin, patch rank and patch position of every event.
pub fn discretize_events(stream: &EventStream, cfg: &GteConfig) -> Result<DiscreteEvents> {
    validate_stream(stream)?;
    cfg.validate()?;
    let Some((t0, t_end)) = stream.time_span() else {
        return Ok(DiscreteEvents::default());
    };
    let p = cfg.p as u32;
    let (pw, _) = cfg.padded_geometry(stream.width, stream.height);
    let cols = pw as u32 / p;
    let n = stream.len();
    let mut out = DiscreteEvents {
        d_t: Vec::with_capacity(n),
        pr: Vec::with_capacity(n),
        pos: Vec::with_capacity(n),
    };
    for i in 0..n {
        let (x, y) = (u32::from(stream.x[i]), u32::from(stream.y[i]));
        out.d_t.push(time_bin(stream.t[i], t0, t_end, cfg.k));
        out.pr.push(x % p + (y % p) * p);
        out.pos.push(x / p + (y / p) * cols);
    }
    Ok(out)
}

/// Flat bin index `l = (K·H·W)·p + (H·W)·d_t + (H·W/P²)·pr + pos` over the padded plane.
pub fn linear_event_index(
    polarity: &[u8],
    events: &DiscreteEvents,
    cfg: &GteConfig,
    width: u32,
    height: u32,
) -> Result<Vec<u32>> {
    let n = polarity.len();
    if events.d_t.len() != n || events.pr.len() != n || events.pos.len() != n {
        return Err(Error::LengthMismatch(format!(
            "p={n} d_t={} pr={} pos={}",
            events.d_t.len(),
            events.pr.len(),
            events.pos.len()
        )));
    }
    check_index_space(cfg, width, height)?;
    let (pw, ph) = cfg.padded_geometry(width, height);
    let hw = (pw * ph) as u32;
    let khw = cfg.k as u32 * hw;
    let tokens = hw / (cfg.p * cfg.p) as u32;
    Ok((0..n)
        .map(|i| {
            khw * u32::from(polarity[i]) + hw * events.d_t[i] + tokens * events.pr[i] + events.pos[i]
        })
        .collect())
}

fn bincount_range(l: &[u32], t: &[u64], t0: u64, t_end: u64, bins: usize) -> Result<DualBins> {
    let mut out = DualBins {
        counts: vec![0; bins],
        time_sums: vec![0.0; bins],
    };
    for (&b, &ti) in l.iter().zip(t) {
        let b = b as usize;
        if b >= bins {
            return Err(Error::IndexOutOfRange { index: b, bins });
        }
        out.counts[b] += 1;
        out.time_sums[b] += relative_time(ti, t0, t_end);
    }
    Ok(out)
}

/// Weighted bin-count of `l` with weights 1 and relative time.
pub fn dual_bincount(l: &[u32], stream: &EventStream, bins: usize) -> Result<DualBins> {
    dual_bincount_sharded(l, stream, bins, 1)
}

/// [`dual_bincount`] split into `workers` contiguous shards, each with private
/// arrays, merged in shard order. Float sums are reproducible for a fixed
/// worker count.
pub fn dual_bincount_sharded(
    l: &[u32],
    stream: &EventStream,
    bins: usize,
    workers: usize,
) -> Result<DualBins> {
    if l.len() != stream.len() {
        return Err(Error::LengthMismatch(format!(
            "{} indices for {} events",
            l.len(),
            stream.len()
        )));
    }
    let Some((t0, t_end)) = stream.time_span() else {
        return Ok(DualBins {
            counts: vec![0; bins],
            time_sums: vec![0.0; bins],
        });
    };
    let ranges = shard_ranges(l.len(), workers);
    let parts: Vec<Result<DualBins>> = if ranges.len() == 1 {
        vec![bincount_range(l, &stream.t, t0, t_end, bins)]
    } else {
        ranges
            .par_iter()
            .map(|r| bincount_range(&l[r.clone()], &stream.t[r.clone()], t0, t_end, bins))
            .collect()
    };
    let mut parts = parts.into_iter();
    let mut acc = parts.next().unwrap()?;
    for part in parts {
        let part = part?;
        acc.counts.iter_mut().zip(&part.counts).for_each(|(a, b)| *a += b);
        acc.time_sums.iter_mut().zip(&part.time_sums).for_each(|(a, b)| *a += b);
    }
    Ok(acc)
}

pub(crate) fn shard_ranges(n: usize, workers: usize) -> Vec<std::ops::Range<usize>> {
    let workers = workers.max(1).min(n.max(1));
    let chunk = n.div_ceil(workers);
    (0..workers)
        .map(|w| (w * chunk).min(n)..((w + 1) * chunk).min(n))
        .collect()
}

/// Reshapes the two bin arrays into the `[tokens, 2K·2P²]` token layout.
pub fn build_group_representation(
    bins: &DualBins,
    cfg: &GteConfig,
    width: u32,
    height: u32,
) -> Result<GroupRepresentation> {
    let expected = cfg.bins(width, height);
    if bins.counts.len() != expected || bins.time_sums.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "expected {expected} bins, got {} / {}",
            bins.counts.len(),
            bins.time_sums.len()
        )));
    }
    let grid = cfg.token_grid(width, height);
    let tokens = grid.0 * grid.1;
    let pp = cfg.p * cfg.p;
    let hw = tokens * pp;
    let mut rep = GroupRepresentation::zeros(grid, cfg.rep_channels());
    let with_time = cfg.mode == TokenMode::Full;
    for cell in 0..cfg.cells() {
        for pr in 0..pp {
            for pos in 0..tokens {
                let b = cell * hw + pr * tokens + pos;
                let row = pos * rep.channels + cell * 2 * pp;
                rep.data[row + pr] = bins.counts[b] as f32;
                if with_time {
                    rep.data[row + pp + pr] = bins.time_sums[b] as f32;
                }
            }
        }
    }
    Ok(rep)
}

/// The staged pipeline: discretise, flat index, dual bin-count, reshape.
pub fn encode_staged(stream: &EventStream, cfg: &GteConfig, workers: usize) -> Result<GroupRepresentation> {
    let events = discretize_events(stream, cfg)?;
    let l = linear_event_index(&stream.p, &events, cfg, stream.width, stream.height)?;
    let bins = dual_bincount_sharded(&l, stream, cfg.bins(stream.width, stream.height), workers)?;
    build_group_representation(&bins, cfg, stream.width, stream.height)
}

/// Per-bin accumulator of raw time offsets `t - t0`.
trait OffsetSum: Copy + Default + Send + Sync {
    fn add(&mut self, dt: u64);
    fn merge(&mut self, other: Self);
    fn to_f64(self) -> f64;
}

/// Exact integer sums; used whenever `N · (t_end - t0)` fits in 64 bits.
impl OffsetSum for u64 {
    #[inline(always)]
    fn add(&mut self, dt: u64) {
        *self += dt;
    }
    fn merge(&mut self, other: Self) {
        *self += other;
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl OffsetSum for f64 {
    #[inline(always)]
    fn add(&mut self, dt: u64) {
        *self += dt as f64;
    }
    fn merge(&mut self, other: Self) {
        *self += other;
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Copy, Default)]
struct Bin<S> {
    count: u32,
    offsets: S,
}

struct FusedPlan {
    k: usize,
    t0: u64,
    t_end: u64,
    /// `thresholds[b]` is the first timestamp falling in time bin `b`; the
    /// last entry is a sentinel.
    thresholds: Vec<u64>,
    /// Flat-index contributions of x and y, `(x mod P)·HW/P² + ⌊x/P⌋` and
    /// `(y mod P)·P·HW/P² + ⌊y/P⌋·W/P`.
    col: Vec<u32>,
    row: Vec<u32>,
    plane: usize,
    width: u32,
    height: u32,
}

impl FusedPlan {
    fn new(cfg: &GteConfig, stream: &EventStream, t0: u64, t_end: u64) -> Self {
        let (k, p) = (cfg.k, cfg.p);
        let (pw, ph) = cfg.padded_geometry(stream.width, stream.height);
        let cols = pw / p;
        let tokens = cols * (ph / p);
        let span = u128::from(t_end - t0) + 1;
        let mut thresholds: Vec<u64> = (0..k)
            .map(|b| t0 + (b as u128 * span).div_ceil(k as u128) as u64)
            .collect();
        thresholds.push(u64::MAX);
        let col = (0..stream.width as usize)
            .map(|x| ((x % p) * tokens + x / p) as u32)
            .collect();
        let row = (0..stream.height as usize)
            .map(|y| ((y % p) * p * tokens + (y / p) * cols) as u32)
            .collect();
        Self {
            k,
            t0,
            t_end,
            thresholds,
            col,
            row,
            plane: pw * ph,
            width: stream.width,
            height: stream.height,
        }
    }

    fn run<S: OffsetSum>(&self, stream: &EventStream, range: std::ops::Range<usize>) -> Result<Vec<Bin<S>>> {
        let mut bins = vec![Bin::<S>::default(); 2 * self.k * self.plane];
        if range.is_empty() {
            return Ok(bins);
        }
        let (t, p, x, y) = (&stream.t, &stream.p, &stream.x, &stream.y);
        let mut prev = if range.start == 0 { self.t0 } else { t[range.start - 1] };
        let mut dt = time_bin(t[range.start].max(self.t0), self.t0, self.t_end, self.k) as usize;
        let polarity_stride = self.k * self.plane;
        let mut base = dt * self.plane;
        for i in range {
            let ti = t[i];
            let (pi, xi, yi) = (p[i], x[i], y[i]);
            if ti < prev || pi > 1 || u32::from(xi) >= self.width || u32::from(yi) >= self.height {
                return validate_stream(stream).and(Err(Error::OutOfRange {
                    index: i,
                    reason: "invalid event".into(),
                }));
            }
            prev = ti;
            if ti >= self.thresholds[dt + 1] {
                while ti >= self.thresholds[dt + 1] {
                    dt += 1;
                }
                base = dt * self.plane;
            }
            let b = base
                + pi as usize * polarity_stride
                + self.col[xi as usize] as usize
                + self.row[yi as usize] as usize;
            let bin = &mut bins[b];
            bin.count += 1;
            bin.offsets.add(ti - self.t0);
        }
        Ok(bins)
    }

    fn accumulate<S: OffsetSum>(&self, stream: &EventStream, workers: usize) -> Result<Vec<Bin<S>>> {
        let ranges = shard_ranges(stream.len(), workers);
        if ranges.len() == 1 {
            return self.run(stream, ranges[0].clone());
        }
        let parts: Vec<Result<Vec<Bin<S>>>> = ranges.into_par_iter().map(|r| self.run(stream, r)).collect();
        let mut parts = parts.into_iter();
        let mut acc = parts.next().unwrap()?;
        for part in parts {
            for (a, b) in acc.iter_mut().zip(part?) {
                a.count += b.count;
                a.offsets.merge(b.offsets);
            }
        }
        Ok(acc)
    }

    /// Rearranges flat-index bins into the token layout.
    fn finish<S: OffsetSum>(&self, bins: &[Bin<S>], cfg: &GteConfig, grid: (usize, usize)) -> GroupRepresentation {
        let inv = if self.t_end > self.t0 {
            1.0 / (self.t_end - self.t0) as f64
        } else {
            0.0
        };
        let with_time = cfg.mode == TokenMode::Full;
        let pp = cfg.p * cfg.p;
        let tokens = grid.0 * grid.1;
        let mut rep = GroupRepresentation::zeros(grid, cfg.rep_channels());
        let channels = rep.channels;
        for (cell, cell_bins) in bins.chunks(self.plane).enumerate() {
            for (pr, pr_bins) in cell_bins.chunks(tokens).enumerate() {
                let offset = cell * 2 * pp + pr;
                for (pos, b) in pr_bins.iter().enumerate() {
                    let at = pos * channels + offset;
                    rep.data[at] = b.count as f32;
                    if with_time {
                        rep.data[at + pp] = (b.offsets.to_f64() * inv) as f32;
                    }
                }
            }
        }
        rep
    }
}

/// Fused single-pass encoder producing the same representation as
/// [`encode_staged`].
///
/// Relies on sorted timestamps: time bins are found by walking precomputed
/// bin thresholds instead of dividing per event, and the bins touched by
/// consecutive events stay within one time slice of the flat index. Raw
/// time offsets are summed as integers when they cannot overflow and are
/// normalised once per bin.
pub fn encode_group_tokens(stream: &EventStream, cfg: &GteConfig, workers: usize) -> Result<GroupRepresentation> {
    cfg.validate()?;
    check_index_space(cfg, stream.width, stream.height)?;
    let n = stream.len();
    if stream.p.len() != n || stream.x.len() != n || stream.y.len() != n {
        return validate_stream(stream).map(|_| unreachable!());
    }
    let grid = cfg.token_grid(stream.width, stream.height);
    let Some((t0, t_end)) = stream.time_span() else {
        return Ok(GroupRepresentation::zeros(grid, cfg.rep_channels()));
    };
    if t_end < t0 {
        return validate_stream(stream).map(|_| unreachable!());
    }
    let plan = FusedPlan::new(cfg, stream, t0, t_end);
    let exact = (n as u128) * u128::from(t_end - t0) <= u128::from(u64::MAX);
    Ok(if exact {
        plan.finish(&plan.accumulate::<u64>(stream, workers)?, cfg, grid)
    } else {
        plan.finish(&plan.accumulate::<f64>(stream, workers)?, cfg, grid)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_bin_examples() {
        assert_eq!(time_bin(0, 0, 999, 4), 0);
        assert_eq!(time_bin(999, 0, 999, 4), 3);
        for k in 1..8 {
            assert_eq!(time_bin(17, 17, 500, k), 0);
            assert!((time_bin(500, 17, 500, k) as usize) < k);
        }
    }

    #[test]
    fn discretize_example() {
        let s = EventStream::new(vec![0], vec![0], vec![3], vec![2], 4, 4).unwrap();
        let cfg = GteConfig::new(2, 2, 4, 8).unwrap();
        let d = discretize_events(&s, &cfg).unwrap();
        assert_eq!((d.d_t[0], d.pr[0], d.pos[0]), (0, 1, 3));
    }

    #[test]
    fn linear_index_examples() {
        let cfg = GteConfig::new(2, 2, 4, 8).unwrap();
        let ev = DiscreteEvents {
            d_t: vec![0, 1, 1],
            pr: vec![0, 1, 3],
            pos: vec![0, 3, 3],
        };
        let l = linear_event_index(&[0, 1, 1], &ev, &cfg, 4, 4).unwrap();
        assert_eq!(l, vec![0, 55, 2 * 2 * 16 - 1]);
    }

    #[test]
    fn bincount_example() {
        let s = EventStream::new(vec![0, 5, 9], vec![0; 3], vec![0; 3], vec![0; 3], 4, 4).unwrap();
        let b = dual_bincount(&[0, 55, 55], &s, 64).unwrap();
        assert_eq!(b.counts[0], 1);
        assert_eq!(b.counts[55], 2);
        assert!((b.time_sums[55] - 14.0 / 9.0).abs() < 1e-12);
        assert!(matches!(
            dual_bincount(&[0, 64, 1], &s, 64),
            Err(Error::IndexOutOfRange { index: 64, .. })
        ));
    }

    #[test]
    fn single_event_has_zero_time_weight() {
        let s = EventStream::new(vec![42], vec![1], vec![1], vec![1], 4, 4).unwrap();
        let b = dual_bincount(&[7], &s, 64).unwrap();
        assert_eq!(b.counts.iter().sum::<u32>(), 1);
        assert!(b.time_sums.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layout_example_lands_on_channel_25() {
        let s = EventStream::new(vec![0, 10], vec![0, 1], vec![0, 3], vec![0, 2], 4, 4).unwrap();
        let cfg = GteConfig::new(2, 2, 4, 8).unwrap();
        let rep = encode_staged(&s, &cfg, 1).unwrap();
        assert_eq!(rep.grid, (2, 2));
        assert_eq!(rep.channels, 32);
        assert_eq!(rep.at(3, 25), 1.0);
        assert_eq!(rep.at(3, 29), 1.0); // time plane of the same cell, t = t_end
        assert_eq!(rep.at(0, 0), 1.0);
        assert_eq!(rep.total_count(&cfg), 2.0);
        assert_eq!(encode_group_tokens(&s, &cfg, 1).unwrap(), rep);
    }

    #[test]
    fn empty_stream_is_all_zero() {
        let cfg = GteConfig::new(2, 2, 4, 8).unwrap();
        let s = EventStream::empty(4, 4);
        let rep = encode_staged(&s, &cfg, 3).unwrap();
        assert!(rep.data.iter().all(|&v| v == 0.0));
        assert_eq!(encode_group_tokens(&s, &cfg, 3).unwrap(), rep);
    }

    #[test]
    fn fused_rejects_corrupt_streams() {
        let cfg = GteConfig::new(2, 2, 4, 8).unwrap();
        let mut s = EventStream::new(vec![0, 5], vec![0, 1], vec![0, 1], vec![0, 1], 4, 4).unwrap();
        s.x[1] = 9;
        assert!(encode_group_tokens(&s, &cfg, 1).is_err());
        s.x[1] = 1;
        s.t = vec![5, 0];
        assert!(encode_group_tokens(&s, &cfg, 1).is_err());
    }

    #[test]
    fn shards_cover_range() {
        for (n, w) in [(0, 3), (1, 4), (10, 3), (10, 10), (7, 1)] {
            let r = shard_ranges(n, w);
            assert_eq!(r.first().unwrap().start, 0);
            assert_eq!(r.last().unwrap().end, n);
            assert!(r.windows(2).all(|p| p[0].end == p[1].start));
        }
    }
}
