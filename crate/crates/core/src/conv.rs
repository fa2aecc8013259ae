//! Grouped, dilated cross-correlation over one or two spatial axes.
//!
//! Both forward and backward lower each (image, group) pair to a matrix
//! product through an im2col buffer.

use crate::element::Element;
use crate::error::{Error, Result};

/// Stride, symmetric zero-padding, dilation and group count of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
            groups,
        }
    }

    /// Stride-1 convolution that keeps spatial size for an odd kernel.
    pub fn same(kernel: usize, dilation: usize, groups: usize) -> Self {
        Self::new(1, dilation * (kernel - 1) / 2, dilation, groups)
    }

    /// `floor((in + 2p - d(k-1) - 1)/s) + 1`, or `None` when that is < 1.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (self.stride > 0 && padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

/// Fully resolved geometry. One-dimensional convolutions use `h = kh = 1`
/// with no padding on that axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub dil_h: usize,
    pub dil_w: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    pub fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    /// Rows of the im2col matrix for one group.
    pub fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    pub fn out_area(&self) -> usize {
        self.oh * self.ow
    }

    pub fn output_dims(&self, one_d: bool) -> Vec<usize> {
        if one_d {
            vec![self.n, self.cout, self.ow]
        } else {
            vec![self.n, self.cout, self.oh, self.ow]
        }
    }

    fn validate_spec(op: &'static str, spec: &ConvSpec) -> Result<()> {
        if spec.stride == 0 || spec.dilation == 0 || spec.groups == 0 {
            return Err(Error::Config(format!(
                "{op}: stride, dilation and groups must be positive, got {spec:?}"
            )));
        }
        Ok(())
    }

    fn check_channels(op: &'static str, cin: usize, cout: usize, wcin: usize, groups: usize) -> Result<()> {
        if !cin.is_multiple_of(groups) || !cout.is_multiple_of(groups) {
            return Err(Error::shape(
                op,
                format!("groups {groups} must divide input channels {cin} and output channels {cout}"),
            ));
        }
        if wcin != cin / groups {
            return Err(Error::shape(
                op,
                format!("weight expects {wcin} channels per group, input has {}", cin / groups),
            ));
        }
        Ok(())
    }

    pub fn conv2d(input: &[usize], weight: &[usize], spec: &ConvSpec) -> Result<Self> {
        const OP: &str = "conv2d";
        Self::validate_spec(OP, spec)?;
        let [n, cin, h, w] = *input else {
            return Err(Error::shape(OP, format!("input must be [N,C,H,W], got {input:?}")));
        };
        let [cout, wcin, kh, kw] = *weight else {
            return Err(Error::shape(OP, format!("weight must be [Cout,Cin/g,k,k], got {weight:?}")));
        };
        if kh != kw {
            return Err(Error::shape(OP, format!("kernel must be square, got {kh}x{kw}")));
        }
        Self::check_channels(OP, cin, cout, wcin, spec.groups)?;
        let (Some(oh), Some(ow)) = (spec.output_extent(h, kh), spec.output_extent(w, kw)) else {
            return Err(Error::Config(format!(
                "{OP}: {h}x{w} input with kernel {kh} and {spec:?} yields an empty output"
            )));
        };
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride_h: spec.stride,
            stride_w: spec.stride,
            pad_h: spec.padding,
            pad_w: spec.padding,
            dil_h: spec.dilation,
            dil_w: spec.dilation,
            groups: spec.groups,
            oh,
            ow,
        })
    }

    pub fn conv1d(input: &[usize], weight: &[usize], spec: &ConvSpec) -> Result<Self> {
        const OP: &str = "conv1d";
        Self::validate_spec(OP, spec)?;
        let [n, cin, l] = *input else {
            return Err(Error::shape(OP, format!("input must be [N,C,L], got {input:?}")));
        };
        let [cout, wcin, k] = *weight else {
            return Err(Error::shape(OP, format!("weight must be [Cout,Cin/g,k], got {weight:?}")));
        };
        Self::check_channels(OP, cin, cout, wcin, spec.groups)?;
        let Some(ow) = spec.output_extent(l, k) else {
            return Err(Error::Config(format!(
                "{OP}: length {l} with kernel {k} and {spec:?} yields an empty output"
            )));
        };
        Ok(Self {
            n,
            cin,
            h: 1,
            w: l,
            cout,
            kh: 1,
            kw: k,
            stride_h: 1,
            stride_w: spec.stride,
            pad_h: 0,
            pad_w: spec.padding,
            dil_h: 1,
            dil_w: spec.dilation,
            groups: spec.groups,
            oh: 1,
            ow,
        })
    }
}

// Input coordinate sampled by output coordinate `o` and kernel tap `k`, or
// `None` inside the zero padding.
#[inline]
fn source(o: usize, k: usize, stride: usize, dil: usize, pad: usize, extent: usize) -> Option<usize> {
    let pos = (o * stride + k * dil) as isize - pad as isize;
    (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
}

/// Gathers one group of one image into `col` (`col_rows x out_area`).
fn im2col<E: Element>(g: &ConvGeom, image: &[E], group: usize, col: &mut [E]) {
    let area = g.out_area();
    let plane = g.h * g.w;
    for c in 0..g.cin_g() {
        let chan = &image[(group * g.cin_g() + c) * plane..][..plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * area..][..area];
                for oy in 0..g.oh {
                    let line = &mut dst[oy * g.ow..][..g.ow];
                    match source(oy, ki, g.stride_h, g.dil_h, g.pad_h, g.h) {
                        None => line.iter_mut().for_each(|v| *v = E::zero()),
                        Some(iy) => {
                            let src = &chan[iy * g.w..][..g.w];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match source(ox, kj, g.stride_w, g.dil_w, g.pad_w, g.w) {
                                    Some(ix) => src[ix],
                                    None => E::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `col` back into one group of an image gradient.
fn col2im<E: Element>(g: &ConvGeom, col: &[E], group: usize, image: &mut [E]) {
    let area = g.out_area();
    let plane = g.h * g.w;
    for c in 0..g.cin_g() {
        let chan = &mut image[(group * g.cin_g() + c) * plane..][..plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * area..][..area];
                for oy in 0..g.oh {
                    let Some(iy) = source(oy, ki, g.stride_h, g.dil_h, g.pad_h, g.h) else {
                        continue;
                    };
                    let line = &src[oy * g.ow..][..g.ow];
                    let dst = &mut chan[iy * g.w..][..g.w];
                    for (ox, v) in line.iter().enumerate() {
                        if let Some(ix) = source(ox, kj, g.stride_w, g.dil_w, g.pad_w, g.w) {
                            dst[ix] = dst[ix] + *v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<E: Element>(g: &ConvGeom, input: &[E], weight: &[E], bias: Option<&[E]>) -> Vec<E> {
    let area = g.out_area();
    let rows = g.col_rows();
    let in_img = g.cin * g.h * g.w;
    let out_img = g.cout * area;
    let mut out = vec![E::zero(); g.n * out_img];
    let mut col = vec![E::zero(); rows * area];
    for n in 0..g.n {
        let image = &input[n * in_img..][..in_img];
        for grp in 0..g.groups {
            im2col(g, image, grp, &mut col);
            let w = &weight[grp * g.cout_g() * rows..][..g.cout_g() * rows];
            let dst = &mut out[n * out_img + grp * g.cout_g() * area..][..g.cout_g() * area];
            E::gemm(false, false, g.cout_g(), area, rows, E::one(), w, &col, E::zero(), dst);
        }
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                out[n * out_img + co * area..][..area]
                    .iter_mut()
                    .for_each(|v| *v = *v + bv);
            }
        }
    }
    out
}

/// Gradients of a convolution given the output gradient. Each requested
/// buffer is freshly allocated.
pub(crate) struct ConvGrads<E> {
    pub input: Option<Vec<E>>,
    pub weight: Option<Vec<E>>,
    pub bias: Option<Vec<E>>,
}

pub(crate) fn backward<E: Element>(
    g: &ConvGeom,
    input: &[E],
    weight: &[E],
    grad_out: &[E],
    want: (bool, bool, bool),
) -> ConvGrads<E> {
    let area = g.out_area();
    let rows = g.col_rows();
    let in_img = g.cin * g.h * g.w;
    let out_img = g.cout * area;
    let wg = g.cout_g() * rows;
    let mut gin = want.0.then(|| vec![E::zero(); input.len()]);
    let mut gw = want.1.then(|| vec![E::zero(); weight.len()]);
    let gb = want.2.then(|| {
        let mut b = vec![E::zero(); g.cout];
        for n in 0..g.n {
            for (co, bv) in b.iter_mut().enumerate() {
                let s: f64 = grad_out[n * out_img + co * area..][..area]
                    .iter()
                    .map(|v| v.to_f64_lossy())
                    .sum();
                *bv = *bv + E::from_f64_lossy(s);
            }
        }
        b
    });
    if gin.is_some() || gw.is_some() {
        let mut col = vec![E::zero(); rows * area];
        for n in 0..g.n {
            let image = &input[n * in_img..][..in_img];
            for grp in 0..g.groups {
                let dout = &grad_out[n * out_img + grp * g.cout_g() * area..][..g.cout_g() * area];
                if let Some(gw) = gw.as_mut() {
                    im2col(g, image, grp, &mut col);
                    // dW[cout_g, rows] += dOut[cout_g, area] * col^T
                    E::gemm(false, true, g.cout_g(), rows, area, E::one(), dout, &col, E::one(), &mut gw[grp * wg..][..wg]);
                }
                if let Some(gin) = gin.as_mut() {
                    let w = &weight[grp * wg..][..wg];
                    // dcol[rows, area] = W^T * dOut
                    E::gemm(true, false, rows, area, g.cout_g(), E::one(), w, dout, E::zero(), &mut col);
                    col2im(g, &col, grp, &mut gin[n * in_img..][..in_img]);
                }
            }
        }
    }
    ConvGrads {
        input: gin,
        weight: gw,
        bias: gb,
    }
}
