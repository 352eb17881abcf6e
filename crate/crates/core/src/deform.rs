//! Deformable 2-D convolution.
//!
//! Every kernel tap `p_n` of the regular grid is displaced by a learned,
//! fractional offset `Δp_n` that varies per output location `p0`:
//!
//! ```text
//! y(p0) = Σ_n w(p_n) · x(p0 + p_n + Δp_n)
//! ```
//!
//! `x(·)` at fractional positions is read with [`bilinear_sample`] semantics
//! (zero outside the border), so gradients flow to the offsets through the
//! interpolation weights. One offset group is shared by all input channels.
//!
//! [`bilinear_sample`]: crate::ops::bilinear_sample

use crate::error::{Error, Result};
use crate::ops::conv::{apply_columns, columns_backward};
use crate::ops::sample::Taps;
use crate::ops::{conv2d, ConvWeights};
use crate::tensor::Tensor;

/// Per-location offsets `[2N, H', W']`, `N = kH * kW`. For tap `n`, channel
/// `2n` holds `Δy` and channel `2n + 1` holds `Δx`.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField {
    offsets: Tensor,
    kernel: (usize, usize),
}

impl OffsetField {
    pub fn new(offsets: Tensor, kh: usize, kw: usize) -> Result<Self> {
        let (c, _, _) = offsets.dims3()?;
        if c != 2 * kh * kw {
            return Err(Error::shape(
                "offset_field",
                format!(
                    "a {kh}x{kw} kernel needs {} offset channels, got {c}",
                    2 * kh * kw
                ),
            ));
        }
        Ok(OffsetField {
            offsets,
            kernel: (kh, kw),
        })
    }

    /// The identity configuration: every tap on the regular grid.
    pub fn zeros(kh: usize, kw: usize, out_h: usize, out_w: usize) -> Self {
        OffsetField {
            offsets: Tensor::zeros(&[2 * kh * kw, out_h, out_w]),
            kernel: (kh, kw),
        }
    }

    /// Same `(Δy, Δx)` for every tap at every location.
    pub fn constant(kh: usize, kw: usize, out_h: usize, out_w: usize, dy: f64, dx: f64) -> Self {
        let plane = out_h * out_w;
        let offsets = Tensor::from_fn(&[2 * kh * kw, out_h, out_w], |i| {
            if (i / plane) % 2 == 0 {
                dy
            } else {
                dx
            }
        });
        OffsetField {
            offsets,
            kernel: (kh, kw),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.offsets
    }

    pub fn into_tensor(self) -> Tensor {
        self.offsets
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        self.kernel
    }

    pub fn spatial_size(&self) -> (usize, usize) {
        (self.offsets.shape()[1], self.offsets.shape()[2])
    }
}

struct DeformGeometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl DeformGeometry {
    fn of(op: &'static str, input: &Tensor, w: &ConvWeights, offsets: &OffsetField) -> Result<Self> {
        let (c, h, wd) = w.check_input(op, input)?;
        let (kh, kw) = w.kernel_size();
        let (oh, ow) = w.output_size(h, wd)?;
        if offsets.kernel_size() != (kh, kw) || offsets.spatial_size() != (oh, ow) {
            return Err(Error::shape(
                op,
                format!(
                    "offsets {:?} do not fit a {kh}x{kw} kernel with {oh}x{ow} output (expected [{}, {oh}, {ow}])",
                    offsets.tensor().shape(),
                    2 * kh * kw
                ),
            ));
        }
        Ok(DeformGeometry {
            c,
            h,
            w: wd,
            kh,
            kw,
            oh,
            ow,
            stride: w.stride,
            pad: w.padding,
        })
    }

    /// Bilinear taps for kernel tap `n` at output position `p`.
    #[inline]
    fn taps(&self, off: &[f64], n: usize, p: usize) -> Option<Taps> {
        let plane = self.oh * self.ow;
        let (oy, ox) = (p / self.ow, p % self.ow);
        let (i, j) = (n / self.kw, n % self.kw);
        let y = (oy * self.stride + i) as f64 - self.pad as f64 + off[2 * n * plane + p];
        let x = (ox * self.stride + j) as f64 - self.pad as f64 + off[(2 * n + 1) * plane + p];
        Taps::at(self.h, self.w, x, y)
    }
}

fn deform_columns(input: &[f64], off: &[f64], g: &DeformGeometry) -> Vec<f64> {
    let p_count = g.oh * g.ow;
    let k = g.kh * g.kw;
    let hw = g.h * g.w;
    let mut cols = vec![0.0; g.c * k * p_count];
    for n in 0..k {
        for p in 0..p_count {
            let Some(taps) = g.taps(off, n, p) else {
                continue;
            };
            for ci in 0..g.c {
                cols[(ci * k + n) * p_count + p] = taps.sample(&input[ci * hw..(ci + 1) * hw]);
            }
        }
    }
    cols
}

/// Deformable convolution of a `[C, H, W]` input.
pub fn deform_conv2d(input: &Tensor, w: &ConvWeights, offsets: &OffsetField) -> Result<Tensor> {
    let g = DeformGeometry::of("deform_conv2d", input, w, offsets)?;
    let cols = deform_columns(input.data(), offsets.tensor().data(), &g);
    let out = apply_columns(w, &cols, g.oh * g.ow);
    Tensor::new(&[w.out_channels(), g.oh, g.ow], out)
}

#[derive(Debug, Clone)]
pub struct DeformConvGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
    pub offsets: Tensor,
}

/// Exact gradients of `<grad_out, deform_conv2d(input, w, offsets)>`.
pub fn deform_conv2d_backward(
    input: &Tensor,
    w: &ConvWeights,
    offsets: &OffsetField,
    grad_out: &Tensor,
) -> Result<DeformConvGrads> {
    let g = DeformGeometry::of("deform_conv2d_backward", input, w, offsets)?;
    if grad_out.shape() != [w.out_channels(), g.oh, g.ow] {
        return Err(Error::shape(
            "deform_conv2d_backward",
            format!(
                "upstream gradient {:?} does not match output [{}, {}, {}]",
                grad_out.shape(),
                w.out_channels(),
                g.oh,
                g.ow
            ),
        ));
    }
    let off = offsets.tensor().data();
    let p_count = g.oh * g.ow;
    let k = g.kh * g.kw;
    let hw = g.h * g.w;
    let cols = deform_columns(input.data(), off, &g);
    let (kernel, bias, dcols) = columns_backward(w, &cols, grad_out.data(), p_count);

    let mut dinput = vec![0.0; g.c * hw];
    let mut doff = vec![0.0; 2 * k * p_count];
    for n in 0..k {
        for p in 0..p_count {
            let Some(taps) = g.taps(off, n, p) else {
                continue;
            };
            let (mut gx, mut gy) = (0.0, 0.0);
            for ci in 0..g.c {
                let gc = dcols[(ci * k + n) * p_count + p];
                if gc == 0.0 {
                    continue;
                }
                let plane = &input.data()[ci * hw..(ci + 1) * hw];
                taps.scatter(&mut dinput[ci * hw..(ci + 1) * hw], gc);
                let (px, py) = taps.coord_grad(plane);
                gx += gc * px;
                gy += gc * py;
            }
            doff[2 * n * p_count + p] = gy;
            doff[(2 * n + 1) * p_count + p] = gx;
        }
    }
    Ok(DeformConvGrads {
        input: Tensor::new(input.shape(), dinput)?,
        kernel,
        bias,
        offsets: Tensor::new(offsets.tensor().shape(), doff)?,
    })
}

/// Predicts the offset field with a regular convolution over the same input.
/// `w_off` must produce `2 * kh * kw` channels.
pub fn offset_branch(input: &Tensor, w_off: &ConvWeights, kh: usize, kw: usize) -> Result<OffsetField> {
    if w_off.out_channels() != 2 * kh * kw {
        return Err(Error::shape(
            "offset_branch",
            format!(
                "offset conv has {} output channels, a {kh}x{kw} kernel needs {}",
                w_off.out_channels(),
                2 * kh * kw
            ),
        ));
    }
    OffsetField::new(conv2d(input, w_off)?, kh, kw)
}

/// A deformable layer: main kernel plus its offset-predicting convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformableConv {
    pub main: ConvWeights,
    pub offset: ConvWeights,
}

impl DeformableConv {
    /// Wraps `main` with a zero-initialised offset branch, so the layer starts
    /// out as a standard convolution.
    pub fn new(main: ConvWeights) -> Self {
        let (kh, kw) = main.kernel_size();
        let offset = ConvWeights::zeros(2 * kh * kw, main.in_channels(), kh, kw, main.stride, main.padding);
        DeformableConv { main, offset }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (kh, kw) = self.main.kernel_size();
        let offsets = offset_branch(input, &self.offset, kh, kw)?;
        deform_conv2d(input, &self.main, &offsets)
    }
}
