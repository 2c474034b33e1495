//! Token aggregation between stages: overlapping group convolution, layer
//! norm, then 3×3 max pooling with stride 2.
//!
//! Output group `j` convolves the `GK` input group slots starting at `j·GS`.
//! Slots past the last real group are zero padding groups.

use crate::error::{Error, Result};
use crate::layers::{planes_to_tokens, tokens_to_planes, LN_EPS};
use crate::params::{Binder, Initializer, Param, ParamSet};
use crate::tensor::{maxpool_output_len, ChannelGrouping, Element, Tensor};

/// Group arithmetic of one aggregation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GtaGeometry {
    pub groups_in: usize,
    pub channels_per_group: usize,
    /// Input groups seen by each output group.
    pub group_kernel: usize,
    /// Slot offset between consecutive output groups.
    pub group_stride: usize,
    pub groups_out: usize,
    /// Group slots including padding, `GS·(⌊G/2⌋−1) + GK`.
    pub slots: usize,
    pub channels_out_per_group: usize,
}

impl GtaGeometry {
    pub fn new(groups: usize, channels_per_group: usize) -> Result<Self> {
        if groups < 2 || channels_per_group == 0 {
            return Err(Error::GroupArithmetic(format!(
                "aggregation needs at least 2 groups of >= 1 channel, got G={groups}, C={channels_per_group}"
            )));
        }
        let half = groups / 2;
        let group_kernel = if half == 1 { groups } else { (half + 1).min(3) };
        let group_stride = (groups.div_ceil(2) - 1).min(2);
        let slots = group_stride * (half - 1) + group_kernel;
        let channels_out = 2 * groups * channels_per_group;
        if slots < groups || !channels_out.is_multiple_of(half) {
            return Err(Error::GroupArithmetic(format!(
                "G={groups}, C={channels_per_group}: {slots} slots, {channels_out} channels over {half} groups"
            )));
        }
        Ok(Self {
            groups_in: groups,
            channels_per_group,
            group_kernel,
            group_stride,
            groups_out: half,
            slots,
            channels_out_per_group: channels_out / half,
        })
    }

    pub fn padding_groups(&self) -> usize {
        self.slots - self.groups_in
    }

    pub fn channels_out(&self) -> usize {
        self.groups_out * self.channels_out_per_group
    }

    /// Input group slots `[start, end)` read by output group `j`.
    pub fn input_slots(&self, j: usize) -> std::ops::Range<usize> {
        j * self.group_stride..j * self.group_stride + self.group_kernel
    }

    pub fn grouping(&self) -> ChannelGrouping {
        ChannelGrouping {
            groups: self.groups_out,
            in_stride: self.group_stride * self.channels_per_group,
            in_span: self.group_kernel * self.channels_per_group,
        }
    }

    /// Token grid after pooling.
    pub fn output_grid(grid: (usize, usize)) -> (usize, usize) {
        (maxpool_output_len(grid.0, 3, 2, 1), maxpool_output_len(grid.1, 3, 2, 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtaParams<T: Element = f32> {
    /// `[2G·C, GK·C, 3, 3]`
    pub conv_w: Param<T>,
    pub conv_b: Param<T>,
    pub norm_gamma: Param<T>,
    pub norm_beta: Param<T>,
}

impl<T: Element> GtaParams<T> {
    pub fn init(prefix: &str, geom: &GtaGeometry, init: &mut Initializer) -> Self {
        let out = geom.channels_out();
        let span = geom.group_kernel * geom.channels_per_group;
        Self {
            conv_w: init.trunc_normal(format!("{prefix}conv.weight"), vec![out, span, 3, 3]),
            conv_b: Param::zeros(format!("{prefix}conv.bias"), vec![out]),
            norm_gamma: Param::ones(format!("{prefix}norm.weight"), vec![out]),
            norm_beta: Param::zeros(format!("{prefix}norm.bias"), vec![out]),
        }
    }
}

impl<T: Element> ParamSet<T> for GtaParams<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.conv_w, &self.conv_b, &self.norm_gamma, &self.norm_beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.conv_w, &mut self.conv_b, &mut self.norm_gamma, &mut self.norm_beta]
    }
}

fn check_input<T: Element>(x: &Tensor<T>, grid: (usize, usize), geom: &GtaGeometry) -> Result<()> {
    let width = geom.groups_in * geom.channels_per_group;
    if x.rank() != 2 || x.shape() != [grid.0 * grid.1, width] {
        return Err(Error::ShapeMismatch(format!(
            "aggregation input {:?}, expected [{}, {width}]",
            x.shape(),
            grid.0 * grid.1
        )));
    }
    Ok(())
}

/// Overlapping group convolution of `[tokens, G·C]` to `[tokens, 2G·C]`.
pub fn overlapping_group_conv<T: Element>(
    x: &Tensor<T>,
    grid: (usize, usize),
    geom: &GtaGeometry,
    params: &GtaParams<T>,
    binder: &Binder<T>,
) -> Result<Tensor<T>> {
    check_input(x, grid, geom)?;
    let planes = tokens_to_planes(x, grid)?;
    let y = planes.conv2d(
        &binder.bind(&params.conv_w),
        Some(&binder.bind(&params.conv_b)),
        geom.grouping(),
    )?;
    planes_to_tokens(&y)
}

/// Full aggregation step; returns the new tokens and grid.
pub fn gta_forward<T: Element>(
    x: &Tensor<T>,
    grid: (usize, usize),
    geom: &GtaGeometry,
    params: &GtaParams<T>,
    binder: &Binder<T>,
) -> Result<(Tensor<T>, (usize, usize))> {
    let y = overlapping_group_conv(x, grid, geom, params, binder)?;
    let y = y.layer_norm(&binder.bind(&params.norm_gamma), &binder.bind(&params.norm_beta), LN_EPS)?;
    let pooled = tokens_to_planes(&y, grid)?.maxpool2d(3, 2, 1)?;
    let out_grid = (pooled.shape()[1], pooled.shape()[2]);
    Ok((planes_to_tokens(&pooled)?, out_grid))
}
