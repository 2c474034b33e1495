//! Channel-grouped 2-D convolution and max pooling on `[C, H, W]` tensors.

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Which input channels each output group reads.
///
/// Output group `j` sees input channels `[j * in_stride, j * in_stride + in_span)`.
/// Channels at or beyond the input channel count read as zero, which is how
/// overlapping groups get their zero padding groups. A standard grouped
/// convolution is the special case `in_stride == in_span == C_in / groups`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelGrouping {
    pub groups: usize,
    pub in_stride: usize,
    pub in_span: usize,
}

impl ChannelGrouping {
    pub fn standard(in_channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || !in_channels.is_multiple_of(groups) {
            return Err(Error::GroupMismatch(format!(
                "{in_channels} input channels cannot be split into {groups} groups"
            )));
        }
        let per = in_channels / groups;
        Ok(Self {
            groups,
            in_stride: per,
            in_span: per,
        })
    }

    /// Number of input channels, padding included, that the groups touch.
    pub fn channel_extent(&self) -> usize {
        (self.groups.saturating_sub(1)) * self.in_stride + self.in_span
    }
}

/// Output length of a pooling window sweep.
pub fn maxpool_output_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

impl<T: Element> Tensor<T> {
    /// Grouped cross-correlation, stride 1, "same" zero padding (`k / 2`).
    ///
    /// `w` has shape `[C_out, in_span, kh, kw]`; `bias`, if present, `[C_out]`.
    pub fn conv2d(&self, w: &Self, bias: Option<&Self>, grouping: ChannelGrouping) -> Result<Self> {
        if self.rank() != 3 || w.rank() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: x {:?}, w {:?}",
                self.shape(),
                w.shape()
            )));
        }
        let (cin, h, wd) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (cout, span, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if grouping.groups == 0 || cout % grouping.groups != 0 {
            return Err(Error::GroupMismatch(format!(
                "{cout} output channels cannot be split into {} groups",
                grouping.groups
            )));
        }
        if span != grouping.in_span {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: weight span {span} but grouping span {}",
                grouping.in_span
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::ShapeMismatch(format!("conv2d: even kernel {kh}x{kw}")));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::ShapeMismatch(format!(
                    "conv2d: bias {:?} for {cout} outputs",
                    b.shape()
                )));
            }
        }
        let geom = ConvGeom {
            h,
            w: wd,
            kh,
            kw,
            per_group: cout / grouping.groups,
            in_stride: grouping.in_stride,
        };

        let x = self.data();
        let wt = w.data();
        let hw = h * wd;
        let mut out = vec![0.0f64; cout * hw];
        for co in 0..cout {
            let base = geom.in_base(co);
            let acc = &mut out[co * hw..(co + 1) * hw];
            if let Some(b) = bias {
                acc.iter_mut().for_each(|v| *v = b.data()[co].wide());
            }
            for cl in 0..span {
                let ci = base + cl;
                if ci >= cin {
                    continue;
                }
                let plane = &x[ci * hw..(ci + 1) * hw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wt[((co * span + cl) * kh + ky) * kw + kx].wide();
                        geom.for_taps(ky, kx, |o, i| acc[o] += wv * plane[i].wide());
                    }
                }
            }
        }
        let data = out.into_iter().map(T::cast).collect();

        let (xt, wt_t, bt) = (self.clone(), w.clone(), bias.cloned());
        let mut parents = vec![self.clone(), w.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Self::from_op("conv2d", vec![cout, h, wd], data, parents, move |g| {
            let x = xt.data();
            let wt = wt_t.data();
            let mut dx = xt.requires_grad().then(|| vec![0.0f64; cin * hw]);
            let mut dw = wt_t.requires_grad().then(|| vec![0.0f64; wt.len()]);
            for co in 0..cout {
                let base = geom.in_base(co);
                let gplane = &g[co * hw..(co + 1) * hw];
                for cl in 0..span {
                    let ci = base + cl;
                    if ci >= cin {
                        continue;
                    }
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let widx = ((co * span + cl) * kh + ky) * kw + kx;
                            if let Some(dx) = dx.as_mut() {
                                let wv = wt[widx].wide();
                                let dplane = &mut dx[ci * hw..(ci + 1) * hw];
                                geom.for_taps(ky, kx, |o, i| dplane[i] += wv * gplane[o].wide());
                            }
                            if let Some(dw) = dw.as_mut() {
                                let plane = &x[ci * hw..(ci + 1) * hw];
                                let mut s = 0.0;
                                geom.for_taps(ky, kx, |o, i| s += gplane[o].wide() * plane[i].wide());
                                dw[widx] += s;
                            }
                        }
                    }
                }
            }
            let mut grads = vec![
                dx.map(|v| v.into_iter().map(T::cast).collect()),
                dw.map(|v| v.into_iter().map(T::cast).collect()),
            ];
            if let Some(b) = &bt {
                grads.push(b.requires_grad().then(|| {
                    g.chunks(hw)
                        .map(|c| T::cast(c.iter().map(|v| v.wide()).sum()))
                        .collect()
                }));
            }
            grads
        }))
    }

    /// Max pooling on `[C, H, W]`. Padding never wins; ties go to the first
    /// element in row-major window order.
    pub fn maxpool2d(&self, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        if self.rank() != 3 || kernel == 0 || stride == 0 || pad >= kernel {
            return Err(Error::ShapeMismatch(format!(
                "maxpool2d: x {:?}, kernel {kernel}, stride {stride}, pad {pad}",
                self.shape()
            )));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(Error::ShapeMismatch(format!(
                "maxpool2d: {h}x{w} input smaller than kernel {kernel}"
            )));
        }
        let oh = maxpool_output_len(h, kernel, stride, pad);
        let ow = maxpool_output_len(w, kernel, stride, pad);
        let x = self.data();
        let mut data = Vec::with_capacity(c * oh * ow);
        let mut arg = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best: Option<(usize, T)> = None;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = (ch * h + iy as usize) * w + ix as usize;
                            if best.is_none_or(|(_, v)| x[i] > v) {
                                best = Some((i, x[i]));
                            }
                        }
                    }
                    let (i, v) = best.expect("window overlaps the input");
                    data.push(v);
                    arg.push(i);
                }
            }
        }
        let n_in = self.numel();
        Ok(Self::from_op("maxpool2d", vec![c, oh, ow], data, vec![self.clone()], move |g| {
            let mut dx = vec![T::zero(); n_in];
            for (gv, &i) in g.iter().zip(&arg) {
                dx[i] = dx[i] + *gv;
            }
            vec![Some(dx)]
        }))
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    per_group: usize,
    in_stride: usize,
}

impl ConvGeom {
    fn in_base(&self, co: usize) -> usize {
        (co / self.per_group) * self.in_stride
    }

    /// Calls `f(out_index, in_index)` for every valid output position of tap `(ky, kx)`.
    #[inline]
    fn for_taps(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize)) {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let oy_lo = ph.saturating_sub(ky);
        let oy_hi = (self.h + ph).saturating_sub(ky).min(self.h);
        let ox_lo = pw.saturating_sub(kx);
        let ox_hi = (self.w + pw).saturating_sub(kx).min(self.w);
        for oy in oy_lo..oy_hi {
            let iy = oy + ky - ph;
            for ox in ox_lo..ox_hi {
                let ix = ox + kx - pw;
                f(oy * self.w + ox, iy * self.w + ix);
            }
        }
    }
}
