//! Columnar event streams: validation, CSV/binary ingestion and synthetic generation.
//!
//! Timestamps are integer microseconds and must be non-decreasing. Polarity is
//! stored as `0` (OFF) or `1` (ON); CSV inputs written with `-1/+1` polarity
//! are mapped onto that domain at parse time.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 4] = b"EVT1";
pub const BINARY_VERSION: u32 = 1;
pub const BINARY_HEADER_LEN: usize = 24;
pub const BINARY_RECORD_LEN: usize = 16;

/// An asynchronous event stream stored column-wise.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EventStream {
    pub t: Vec<u64>,
    pub p: Vec<u8>,
    pub x: Vec<u16>,
    pub y: Vec<u16>,
    pub width: u32,
    pub height: u32,
}

impl EventStream {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            ..Self::default()
        }
    }

    /// Builds a stream from columns and validates it.
    pub fn new(
        t: Vec<u64>,
        p: Vec<u8>,
        x: Vec<u16>,
        y: Vec<u16>,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let stream = Self {
            t,
            p,
            x,
            y,
            width,
            height,
        };
        validate_stream(&stream)?;
        Ok(stream)
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// First and last timestamps, `None` for an empty stream.
    pub fn time_span(&self) -> Option<(u64, u64)> {
        Some((*self.t.first()?, *self.t.last()?))
    }

    /// Mirrors every timestamp around the stream's midpoint (`t' = t0 + t_end - t`)
    /// and reverses event order so the result stays sorted.
    pub fn time_reversed(&self) -> Self {
        let Some((t0, t_end)) = self.time_span() else {
            return self.clone();
        };
        let rev = |v: &[u16]| v.iter().rev().copied().collect::<Vec<_>>();
        Self {
            t: self.t.iter().rev().map(|&t| t0 + t_end - t).collect(),
            p: self.p.iter().rev().copied().collect(),
            x: rev(&self.x),
            y: rev(&self.y),
            width: self.width,
            height: self.height,
        }
    }
}

/// Checks every stream invariant, reporting the first offending index.
pub fn validate_stream(stream: &EventStream) -> Result<()> {
    let n = stream.t.len();
    if stream.p.len() != n || stream.x.len() != n || stream.y.len() != n {
        return Err(Error::LengthMismatch(format!(
            "t={} p={} x={} y={}",
            n,
            stream.p.len(),
            stream.x.len(),
            stream.y.len()
        )));
    }
    if stream.width == 0 || stream.height == 0 {
        return Err(Error::Config(format!(
            "sensor geometry must be at least 1x1, got {}x{}",
            stream.width, stream.height
        )));
    }
    for i in 0..n {
        if stream.p[i] > 1 {
            return Err(Error::OutOfRange {
                index: i,
                reason: format!("polarity {} not in {{0,1}}", stream.p[i]),
            });
        }
        if u32::from(stream.x[i]) >= stream.width {
            return Err(Error::OutOfRange {
                index: i,
                reason: format!("x={} outside [0,{})", stream.x[i], stream.width),
            });
        }
        if u32::from(stream.y[i]) >= stream.height {
            return Err(Error::OutOfRange {
                index: i,
                reason: format!("y={} outside [0,{})", stream.y[i], stream.height),
            });
        }
        if i > 0 && stream.t[i] < stream.t[i - 1] {
            return Err(Error::NonMonotonicTime {
                index: i,
                prev: stream.t[i - 1],
                next: stream.t[i],
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Binary,
}

impl std::str::FromStr for EventFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "binary" | "bin" => Ok(Self::Binary),
            other => Err(Error::Config(format!("unknown event format `{other}`"))),
        }
    }
}

/// Loads and validates an event file.
///
/// CSV files carry no geometry, so `sensor` is required for them. For binary
/// files the geometry comes from the header; a supplied `sensor` must agree.
pub fn load_events(
    path: impl AsRef<Path>,
    format: EventFormat,
    sensor: Option<(u32, u32)>,
) -> Result<EventStream> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    match format {
        EventFormat::Csv => {
            let (w, h) = sensor.ok_or_else(|| {
                Error::Config("CSV event files need an explicit sensor width and height".into())
            })?;
            read_csv(reader, w, h)
        }
        EventFormat::Binary => {
            let stream = read_binary(reader).map_err(|e| match e {
                Error::Format { reason, .. } => Error::Format {
                    path: path.to_path_buf(),
                    reason,
                },
                other => other,
            })?;
            if let Some((w, h)) = sensor {
                if (w, h) != (stream.width, stream.height) {
                    return Err(Error::Config(format!(
                        "file geometry {}x{} does not match requested {w}x{h}",
                        stream.width, stream.height
                    )));
                }
            }
            Ok(stream)
        }
    }
}

fn parse_field<'a>(
    fields: &mut impl Iterator<Item = &'a str>,
    line: usize,
    name: &str,
) -> Result<&'a str> {
    fields
        .next()
        .map(str::trim)
        .ok_or_else(|| Error::MalformedRecord {
            line,
            reason: format!("missing field `{name}`"),
        })
}

fn parse_int(s: &str, line: usize, name: &str) -> Result<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return Ok(v);
    }
    // float timestamps are floored
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && name == "t" => Ok(v.floor() as i64),
        _ => Err(Error::MalformedRecord {
            line,
            reason: format!("cannot parse `{s}` as {name}"),
        }),
    }
}

/// Parses header-less `t,p,x,y` rows.
pub fn read_csv<R: BufRead>(reader: R, width: u32, height: u32) -> Result<EventStream> {
    let mut stream = EventStream::empty(width, height);
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let index = stream.len();
        let mut fields = line.split(',');
        let t = parse_int(parse_field(&mut fields, lineno, "t")?, lineno, "t")?;
        let p = parse_int(parse_field(&mut fields, lineno, "p")?, lineno, "p")?;
        let x = parse_int(parse_field(&mut fields, lineno, "x")?, lineno, "x")?;
        let y = parse_int(parse_field(&mut fields, lineno, "y")?, lineno, "y")?;
        if fields.next().is_some() {
            return Err(Error::MalformedRecord {
                line: lineno,
                reason: "expected exactly 4 fields".into(),
            });
        }
        if t < 0 {
            return Err(Error::OutOfRange {
                index,
                reason: format!("negative timestamp {t}"),
            });
        }
        let p = match p {
            0 | -1 => 0u8,
            1 => 1u8,
            other => {
                return Err(Error::OutOfRange {
                    index,
                    reason: format!("polarity {other} not in {{0,1}} or {{-1,+1}}"),
                })
            }
        };
        if x < 0 || x >= i64::from(width) || y < 0 || y >= i64::from(height) {
            return Err(Error::OutOfRange {
                index,
                reason: format!("({x},{y}) outside {width}x{height} sensor"),
            });
        }
        let t = t as u64;
        if let Some(&prev) = stream.t.last() {
            if t < prev {
                return Err(Error::NonMonotonicTime {
                    index,
                    prev,
                    next: t,
                });
            }
        }
        stream.t.push(t);
        stream.p.push(p);
        stream.x.push(x as u16);
        stream.y.push(y as u16);
    }
    Ok(stream)
}

pub fn write_csv<W: Write>(stream: &EventStream, writer: W) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for i in 0..stream.len() {
        writeln!(w, "{},{},{},{}", stream.t[i], stream.p[i], stream.x[i], stream.y[i])?;
    }
    w.flush()?;
    Ok(())
}

fn format_err(reason: impl Into<String>) -> Error {
    Error::Format {
        path: "<stream>".into(),
        reason: reason.into(),
    }
}

/// Reads the little-endian `EVT1` binary layout.
pub fn read_binary<R: Read>(mut reader: R) -> Result<EventStream> {
    let mut header = [0u8; BINARY_HEADER_LEN];
    reader
        .read_exact(&mut header)
        .map_err(|_| format_err("truncated header"))?;
    if &header[0..4] != BINARY_MAGIC {
        return Err(format_err("bad magic, expected EVT1"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != BINARY_VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let width = u32_at(8);
    let height = u32_at(12);
    let count = u64::from_le_bytes(header[16..24].try_into().unwrap()) as usize;

    let mut stream = EventStream::empty(width, height);
    stream.t.reserve_exact(count);
    stream.p.reserve_exact(count);
    stream.x.reserve_exact(count);
    stream.y.reserve_exact(count);

    const CHUNK: usize = 4096;
    let mut buf = vec![0u8; CHUNK * BINARY_RECORD_LEN];
    let mut remaining = count;
    while remaining > 0 {
        let take = remaining.min(CHUNK);
        let bytes = &mut buf[..take * BINARY_RECORD_LEN];
        reader
            .read_exact(bytes)
            .map_err(|_| format_err(format!("truncated body: {remaining} records missing")))?;
        for rec in bytes.chunks_exact(BINARY_RECORD_LEN) {
            stream.t.push(u64::from_le_bytes(rec[0..8].try_into().unwrap()));
            stream.p.push(rec[8]);
            stream.x.push(u16::from_le_bytes([rec[12], rec[13]]));
            stream.y.push(u16::from_le_bytes([rec[14], rec[15]]));
        }
        remaining -= take;
    }
    let mut probe = [0u8; 1];
    if reader.read(&mut probe)? != 0 {
        return Err(format_err("trailing bytes after last record"));
    }
    validate_stream(&stream)?;
    Ok(stream)
}

pub fn write_binary<W: Write>(stream: &EventStream, writer: W) -> Result<()> {
    let mut w = BufWriter::new(writer);
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&BINARY_VERSION.to_le_bytes())?;
    w.write_all(&stream.width.to_le_bytes())?;
    w.write_all(&stream.height.to_le_bytes())?;
    w.write_all(&(stream.len() as u64).to_le_bytes())?;
    let mut rec = [0u8; BINARY_RECORD_LEN];
    for i in 0..stream.len() {
        rec[0..8].copy_from_slice(&stream.t[i].to_le_bytes());
        rec[8] = stream.p[i];
        rec[12..14].copy_from_slice(&stream.x[i].to_le_bytes());
        rec[14..16].copy_from_slice(&stream.y[i].to_le_bytes());
        w.write_all(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_events_binary(stream: &EventStream, path: impl AsRef<Path>) -> Result<()> {
    validate_stream(stream)?;
    write_binary(stream, File::create(path)?)
}

pub fn save_events_csv(stream: &EventStream, path: impl AsRef<Path>) -> Result<()> {
    validate_stream(stream)?;
    write_csv(stream, File::create(path)?)
}

/// Spatial structure of a synthetic stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionModel {
    /// Uniform events over the whole sensor and time range.
    UniformNoise,
    /// A vertical bar sweeping left to right once over the duration.
    MovingBar,
    /// A disc orbiting the sensor centre once over the duration.
    RotatingDot,
}

impl std::str::FromStr for MotionModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform_noise" | "noise" => Ok(Self::UniformNoise),
            "moving_bar" | "bar" => Ok(Self::MovingBar),
            "rotating_dot" | "dot" => Ok(Self::RotatingDot),
            other => Err(Error::Config(format!("unknown motion model `{other}`"))),
        }
    }
}

/// Fraction of structured-model events drawn as background noise.
pub const SYNTHETIC_NOISE_FRACTION: f64 = 0.05;

/// Geometry of the moving bar at time `t`: `(left column, bar width)`.
pub fn moving_bar_extent(t: u64, width: u32, duration: u64) -> (u32, u32) {
    let bar = (width / 8).max(1);
    let travel = width - bar;
    let frac = t as f64 / duration as f64;
    let left = ((frac * f64::from(travel + 1)).floor() as u32).min(travel);
    (left, bar)
}

/// Geometry of the rotating dot at time `t`: `(centre x, centre y, radius)`.
pub fn rotating_dot_extent(t: u64, width: u32, height: u32, duration: u64) -> (f64, f64, f64) {
    let side = f64::from(width.min(height));
    let orbit = 0.3 * side;
    let radius = (0.1 * side).max(1.0);
    let angle = std::f64::consts::TAU * t as f64 / duration as f64;
    (
        f64::from(width) / 2.0 + orbit * angle.cos(),
        f64::from(height) / 2.0 + orbit * angle.sin(),
        radius,
    )
}

/// Deterministic synthetic events; a pure function of its arguments.
///
/// Timestamps are stratified (`t_i = floor((i + u_i) * duration / n)`), which
/// keeps them sorted without a sort pass.
pub fn generate_synthetic_stream(
    seed: u64,
    n_events: usize,
    width: u32,
    height: u32,
    duration: u64,
    motion: MotionModel,
) -> EventStream {
    assert!(width >= 1 && height >= 1 && duration >= 1);
    assert!(width <= 1 << 16 && height <= 1 << 16, "coordinates are 16-bit");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = EventStream::empty(width, height);
    s.t.reserve_exact(n_events);
    s.p.reserve_exact(n_events);
    s.x.reserve_exact(n_events);
    s.y.reserve_exact(n_events);
    let step = duration as f64 / n_events.max(1) as f64;

    for i in 0..n_events {
        let u: f64 = rng.random();
        let t = (((i as f64 + u) * step).floor() as u64).min(duration - 1);
        let noise = motion == MotionModel::UniformNoise || rng.random_bool(SYNTHETIC_NOISE_FRACTION);
        let (x, y, p) = if noise {
            (
                rng.random_range(0..width),
                rng.random_range(0..height),
                rng.random_range(0..2u8),
            )
        } else {
            match motion {
                MotionModel::MovingBar => {
                    let (left, bar) = moving_bar_extent(t, width, duration);
                    let x = left + rng.random_range(0..bar);
                    // leading edge brightens, trailing edge darkens
                    let p = u8::from(bar < 2 || x >= left + bar / 2);
                    (x, rng.random_range(0..height), p)
                }
                MotionModel::RotatingDot => {
                    let (cx, cy, r) = rotating_dot_extent(t, width, height, duration);
                    let rho = r * rng.random::<f64>().sqrt();
                    let phi = std::f64::consts::TAU * rng.random::<f64>();
                    let x = (cx + rho * phi.cos()).floor().clamp(0.0, f64::from(width - 1));
                    let y = (cy + rho * phi.sin()).floor().clamp(0.0, f64::from(height - 1));
                    (x as u32, y as u32, rng.random_range(0..2u8))
                }
                MotionModel::UniformNoise => unreachable!(),
            }
        };
        s.t.push(t);
        s.p.push(p);
        s.x.push(x as u16);
        s.y.push(y as u16);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_events() -> EventStream {
        EventStream::new(vec![0, 5], vec![0, 1], vec![0, 3], vec![0, 2], 4, 4).unwrap()
    }

    #[test]
    fn csv_two_rows() {
        let s = read_csv("0,0,0,0\n5,1,3,2\n".as_bytes(), 4, 4).unwrap();
        assert_eq!(s, two_events());
    }

    #[test]
    fn csv_empty_file() {
        let s = read_csv("".as_bytes(), 4, 4).unwrap();
        assert_eq!(s.len(), 0);
    }

    #[test]
    fn csv_bad_polarity() {
        let err = read_csv("5,2,3,2\n".as_bytes(), 4, 4).unwrap_err();
        assert!(matches!(err, Error::OutOfRange { index: 0, .. }), "{err}");
    }

    #[test]
    fn csv_signed_polarity_and_float_time() {
        let s = read_csv("1.9,-1,0,0\n2,+1,1,1\n".as_bytes(), 4, 4).unwrap();
        assert_eq!(s.t, vec![1, 2]);
        assert_eq!(s.p, vec![0, 1]);
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(
            read_csv("1,0,0\n".as_bytes(), 4, 4),
            Err(Error::MalformedRecord { line: 1, .. })
        ));
        assert!(matches!(
            read_csv("1,0,0,0,9\n".as_bytes(), 4, 4),
            Err(Error::MalformedRecord { .. })
        ));
        assert!(matches!(
            read_csv("a,0,0,0\n".as_bytes(), 4, 4),
            Err(Error::MalformedRecord { .. })
        ));
        assert!(matches!(
            read_csv("5,0,0,0\n4,0,0,0\n".as_bytes(), 4, 4),
            Err(Error::NonMonotonicTime { index: 1, .. })
        ));
        assert!(matches!(
            read_csv("5,0,4,0\n".as_bytes(), 4, 4),
            Err(Error::OutOfRange { index: 0, .. })
        ));
    }

    #[test]
    fn validate_examples() {
        validate_stream(&two_events()).unwrap();
        let mut s = two_events();
        s.t = vec![5, 4];
        assert!(matches!(
            validate_stream(&s),
            Err(Error::NonMonotonicTime { index: 1, .. })
        ));
        let s = EventStream {
            t: vec![0],
            p: vec![0],
            x: vec![4],
            y: vec![0],
            width: 4,
            height: 4,
        };
        assert!(matches!(validate_stream(&s), Err(Error::OutOfRange { index: 0, .. })));
        let mut s = two_events();
        s.p.pop();
        assert!(matches!(validate_stream(&s), Err(Error::LengthMismatch(_))));
    }

    #[test]
    fn binary_sizes() {
        let mut buf = Vec::new();
        write_binary(&EventStream::empty(4, 4), &mut buf).unwrap();
        assert_eq!(buf.len(), 24);
        let mut buf = Vec::new();
        write_binary(&two_events(), &mut buf).unwrap();
        assert_eq!(buf.len(), 24 + 2 * 16);
        assert_eq!(&buf[0..4], b"EVT1");
        assert_eq!(read_binary(buf.as_slice()).unwrap(), two_events());
    }

    #[test]
    fn binary_rejects_truncation_and_trailing() {
        let mut buf = Vec::new();
        write_binary(&two_events(), &mut buf).unwrap();
        assert!(read_binary(&buf[..buf.len() - 1]).is_err());
        buf.push(0);
        assert!(read_binary(buf.as_slice()).is_err());
        let mut bad = Vec::new();
        write_binary(&two_events(), &mut bad).unwrap();
        bad[0] = b'X';
        assert!(read_binary(bad.as_slice()).is_err());
    }

    #[test]
    fn synthetic_basics() {
        let s = generate_synthetic_stream(0, 0, 16, 16, 1000, MotionModel::MovingBar);
        assert!(s.is_empty());
        let a = generate_synthetic_stream(3, 5000, 32, 24, 10_000, MotionModel::RotatingDot);
        let b = generate_synthetic_stream(3, 5000, 32, 24, 10_000, MotionModel::RotatingDot);
        assert_eq!(a, b);
        validate_stream(&a).unwrap();
        let c = generate_synthetic_stream(4, 5000, 32, 24, 10_000, MotionModel::RotatingDot);
        assert_ne!(a, c);
    }

    #[test]
    fn moving_bar_is_spatially_structured() {
        let (w, h, d) = (64, 48, 100_000);
        let s = generate_synthetic_stream(1, 10_000, w, h, d, MotionModel::MovingBar);
        validate_stream(&s).unwrap();
        let inside = (0..s.len())
            .filter(|&i| {
                let (left, bar) = moving_bar_extent(s.t[i], w, d);
                let x = u32::from(s.x[i]);
                x >= left && x < left + bar
            })
            .count();
        assert!(inside as f64 >= 0.9 * s.len() as f64, "{inside}");
    }

    #[test]
    fn time_reversal_is_an_involution() {
        let s = generate_synthetic_stream(9, 300, 16, 16, 1000, MotionModel::RotatingDot);
        let r = s.time_reversed();
        validate_stream(&r).unwrap();
        assert_eq!(r.time_span(), s.time_span());
        assert_eq!(r.time_reversed(), s);
    }
}
