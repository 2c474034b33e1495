//! Group token embedding: events to a dense per-patch token grid.
//!
//! Every event is discretised into a time bin `d_t`, a rank `pr` inside its
//! `P×P` patch and the patch position `pos`. Together with polarity these
//! form a flat bin index; two weighted bin-counts (ones, and relative time)
//! give a count plane and a time-weight plane which are reshaped into
//! `(H/P · W/P) × (2K · 2P²)` tokens.
//!
//! Channel layout of a token: `(p·K + d_t)·2P² + s·P² + pr`, with `s = 0` for
//! the count plane and `s = 1` for the time-weight plane. Each
//! `(polarity, time bin)` cell therefore owns a contiguous block of `2P²`
//! channels, and the `G` channel groups of the embedding convolution line up
//! with consecutive cells.

mod baseline;
mod embed;
mod encode;

pub use baseline::{encode_event_histogram, encode_voxel_grid};
pub use embed::{group_token_embed, group_token_embed_tensor, GteParams};
pub use encode::{
    build_group_representation, discretize_events, dual_bincount, dual_bincount_sharded,
    encode_group_tokens, encode_staged, linear_event_index, relative_time, DiscreteEvents,
    DualBins,
};

use crate::error::{Error, Result};

/// Which planes the encoder fills.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TokenMode {
    /// Count and time-weight planes for every polarity and time bin.
    #[default]
    Full,
    /// Ablation without temporal information: the time-weight plane is left
    /// at zero and a single group may hold every cell.
    SpatialOnly,
}

/// Hyperparameters of the encoder and its embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GteConfig {
    /// Number of time intervals.
    pub k: usize,
    /// Patch side in pixels.
    pub p: usize,
    /// Channel groups after embedding.
    pub g: usize,
    /// Total embedded width, `G * C`.
    pub embed_dim: usize,
    pub mode: TokenMode,
}

impl GteConfig {
    pub fn new(k: usize, p: usize, g: usize, embed_dim: usize) -> Result<Self> {
        let cfg = Self {
            k,
            p,
            g,
            embed_dim,
            mode: TokenMode::Full,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.p == 0 {
            return Err(Error::Config(format!("K={} and P={} must be >= 1", self.k, self.p)));
        }
        let ok_groups = self.g == 2 * self.k
            || (self.g == self.k && self.k.is_multiple_of(2))
            || (self.mode == TokenMode::SpatialOnly && self.g == 1);
        if !ok_groups {
            return Err(Error::Config(format!(
                "G={} must equal 2K={} or K={} with K even",
                self.g,
                2 * self.k,
                self.k
            )));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.g) {
            return Err(Error::Config(format!(
                "embed_dim={} is not a positive multiple of G={}",
                self.embed_dim, self.g
            )));
        }
        Ok(())
    }

    /// Channels per group after embedding, `C`.
    pub fn channels_per_group(&self) -> usize {
        self.embed_dim / self.g
    }

    /// Number of `(polarity, time bin)` cells, `2K`.
    pub fn cells(&self) -> usize {
        2 * self.k
    }

    /// Representation channels per token, `2K · 2P²`.
    pub fn rep_channels(&self) -> usize {
        self.cells() * 2 * self.p * self.p
    }

    /// Representation channels read by each embedding group.
    pub fn rep_channels_per_group(&self) -> usize {
        self.rep_channels() / self.g
    }

    /// Sensor plane padded on the right/bottom to a multiple of `P`.
    pub fn padded_geometry(&self, width: u32, height: u32) -> (usize, usize) {
        let p = self.p;
        ((width as usize).div_ceil(p) * p, (height as usize).div_ceil(p) * p)
    }

    /// Token grid `(rows, cols)` for a sensor.
    pub fn token_grid(&self, width: u32, height: u32) -> (usize, usize) {
        let (w, h) = self.padded_geometry(width, height);
        (h / self.p, w / self.p)
    }

    /// Number of bins of the flat index, `2K · H · W` on the padded plane.
    pub fn bins(&self, width: u32, height: u32) -> usize {
        let (w, h) = self.padded_geometry(width, height);
        self.cells() * w * h
    }
}

/// Dense token grid produced by the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRepresentation {
    /// Token grid `(rows, cols)`; token index is `row * cols + col`.
    pub grid: (usize, usize),
    pub channels: usize,
    /// Row-major `[tokens, channels]`.
    pub data: Vec<f32>,
}

impl GroupRepresentation {
    pub fn zeros(grid: (usize, usize), channels: usize) -> Self {
        Self {
            grid,
            channels,
            data: vec![0.0; grid.0 * grid.1 * channels],
        }
    }

    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn at(&self, token: usize, channel: usize) -> f32 {
        self.data[token * self.channels + channel]
    }

    /// Sum of every count-plane entry.
    pub fn total_count(&self, cfg: &GteConfig) -> f64 {
        let pp = cfg.p * cfg.p;
        self.data
            .chunks(self.channels)
            .flat_map(|tok| tok.chunks(2 * pp).flat_map(|cell| &cell[..pp]))
            .map(|&v| f64::from(v))
            .sum()
    }
}
