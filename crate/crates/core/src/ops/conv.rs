//! Standard 2-D convolution over a single `[C, H, W]` image, lowered to a
//! matrix product through an im2col buffer. Borders are zero-padded.

use rand::Rng;

use super::linalg::gemm;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Kernel `[outC, inC, kH, kW]`, bias `[outC]`, stride and zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvWeights {
    pub fn new(kernel: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        if kernel.rank() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be [outC, inC, kH, kW], got {:?}", kernel.shape()),
            ));
        }
        if bias.shape() != [kernel.shape()[0]] {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "bias shape {:?} does not match {} output channels",
                    bias.shape(),
                    kernel.shape()[0]
                ),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("stride", "must be at least 1"));
        }
        Ok(ConvWeights {
            kernel,
            bias,
            stride,
            padding,
        })
    }

    pub fn zeros(out_c: usize, in_c: usize, kh: usize, kw: usize, stride: usize, padding: usize) -> Self {
        Self::new(
            Tensor::zeros(&[out_c, in_c, kh, kw]),
            Tensor::zeros(&[out_c]),
            stride,
            padding,
        )
        .expect("valid zero conv")
    }

    /// He-normal kernel, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn he_normal<R: Rng + ?Sized>(
        out_c: usize,
        in_c: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_c * kh * kw) as f64;
        Self::new(
            Tensor::randn(&[out_c, in_c, kh, kw], (2.0 / fan_in).sqrt(), rng),
            Tensor::zeros(&[out_c]),
            stride,
            padding,
        )
        .expect("valid conv")
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernel.shape()[2], self.kernel.shape()[3])
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel_size();
        match (
            conv_output_size(h, kh, self.stride, self.padding),
            conv_output_size(w, kw, self.stride, self.padding),
        ) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::shape(
                "conv2d",
                format!(
                    "a {kh}x{kw} kernel with padding {} does not fit a {h}x{w} input",
                    self.padding
                ),
            )),
        }
    }

    pub(crate) fn check_input(&self, op: &'static str, input: &Tensor) -> Result<(usize, usize, usize)> {
        let (c, h, w) = input.dims3()?;
        if c != self.in_channels() {
            return Err(Error::shape(
                op,
                format!(
                    "input has {c} channels but the kernel expects {}",
                    self.in_channels()
                ),
            ));
        }
        Ok((c, h, w))
    }
}

/// `floor((n + 2p - k) / s) + 1`, or `None` when the kernel does not fit.
pub fn conv_output_size(n: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = n + 2 * padding;
    if k == 0 || stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

struct Geometry {
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

impl Geometry {
    fn of(op: &'static str, input: &Tensor, w: &ConvWeights) -> Result<Self> {
        let (c, h, wd) = w.check_input(op, input)?;
        let (kh, kw) = w.kernel_size();
        let (oh, ow) = w.output_size(h, wd)?;
        Ok(Geometry {
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

    /// Input coordinate for output position `o` and tap `k`, if in bounds.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
        let v = (o * stride + k) as isize - pad as isize;
        (v >= 0 && (v as usize) < limit).then_some(v as usize)
    }
}

fn im2col(input: &[f64], g: &Geometry) -> Vec<f64> {
    let p = g.oh * g.ow;
    let mut cols = vec![0.0; g.c * g.kh * g.kw * p];
    for ci in 0..g.c {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((ci * g.kh + i) * g.kw + j) * p;
                for oy in 0..g.oh {
                    let Some(y) = Geometry::src(oy, i, g.stride, g.pad, g.h) else {
                        continue;
                    };
                    for ox in 0..g.ow {
                        if let Some(x) = Geometry::src(ox, j, g.stride, g.pad, g.w) {
                            cols[row + oy * g.ow + ox] = plane[y * g.w + x];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &Geometry) -> Vec<f64> {
    let p = g.oh * g.ow;
    let mut out = vec![0.0; g.c * g.h * g.w];
    for ci in 0..g.c {
        let plane = &mut out[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((ci * g.kh + i) * g.kw + j) * p;
                for oy in 0..g.oh {
                    let Some(y) = Geometry::src(oy, i, g.stride, g.pad, g.h) else {
                        continue;
                    };
                    for ox in 0..g.ow {
                        if let Some(x) = Geometry::src(ox, j, g.stride, g.pad, g.w) {
                            plane[y * g.w + x] += cols[row + oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Multiplies the flattened kernel against a column buffer and adds the bias.
pub(crate) fn apply_columns(w: &ConvWeights, cols: &[f64], positions: usize) -> Vec<f64> {
    let out_c = w.out_channels();
    let k = w.kernel.len() / out_c;
    let mut out = vec![0.0; out_c * positions];
    for (o, b) in w.bias.data().iter().enumerate() {
        out[o * positions..(o + 1) * positions].fill(*b);
    }
    gemm(out_c, k, positions, w.kernel.data(), false, cols, false, &mut out, 1.0);
    out
}

/// Kernel and bias gradients plus the column-buffer gradient.
pub(crate) fn columns_backward(
    w: &ConvWeights,
    cols: &[f64],
    grad_out: &[f64],
    positions: usize,
) -> (Tensor, Tensor, Vec<f64>) {
    let out_c = w.out_channels();
    let k = w.kernel.len() / out_c;
    let mut dk = vec![0.0; out_c * k];
    gemm(out_c, positions, k, grad_out, false, cols, true, &mut dk, 0.0);
    let db: Vec<f64> = grad_out.chunks(positions).map(|r| r.iter().sum()).collect();
    let mut dcols = vec![0.0; k * positions];
    gemm(k, out_c, positions, w.kernel.data(), true, grad_out, false, &mut dcols, 0.0);
    (
        Tensor::new(w.kernel.shape(), dk).expect("kernel grad shape"),
        Tensor::new(&[out_c], db).expect("bias grad shape"),
        dcols,
    )
}

/// `y(p0) = sum_n w(p_n) x(p0 + p_n) + b` with zero padding outside the input.
pub fn conv2d(input: &Tensor, w: &ConvWeights) -> Result<Tensor> {
    let g = Geometry::of("conv2d", input, w)?;
    let cols = im2col(input.data(), &g);
    let out = apply_columns(w, &cols, g.oh * g.ow);
    Tensor::new(&[w.out_channels(), g.oh, g.ow], out)
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(input: &Tensor, w: &ConvWeights, grad_out: &Tensor) -> Result<Conv2dGrads> {
    let g = Geometry::of("conv2d_backward", input, w)?;
    if grad_out.shape() != [w.out_channels(), g.oh, g.ow] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "upstream gradient {:?} does not match output [{}, {}, {}]",
                grad_out.shape(),
                w.out_channels(),
                g.oh,
                g.ow
            ),
        ));
    }
    let cols = im2col(input.data(), &g);
    let (kernel, bias, dcols) = columns_backward(w, &cols, grad_out.data(), g.oh * g.ow);
    let dinput = col2im(&dcols, &g);
    Ok(Conv2dGrads {
        input: Tensor::new(input.shape(), dinput)?,
        kernel,
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn direct_conv(input: &Tensor, w: &ConvWeights) -> Tensor {
        let (c, h, wd) = input.dims3().unwrap();
        let (kh, kw) = w.kernel_size();
        let (oh, ow) = w.output_size(h, wd).unwrap();
        let oc = w.out_channels();
        Tensor::from_fn(&[oc, oh, ow], |idx| {
            let o = idx / (oh * ow);
            let oy = (idx / ow) % oh;
            let ox = idx % ow;
            let mut acc = w.bias.data()[o];
            for ci in 0..c {
                for i in 0..kh {
                    for j in 0..kw {
                        let y = (oy * w.stride + i) as isize - w.padding as isize;
                        let x = (ox * w.stride + j) as isize - w.padding as isize;
                        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < wd {
                            acc += w.kernel.data()[((o * c + ci) * kh + i) * kw + j]
                                * input.at3(ci, y as usize, x as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[1, 5, 4], 1.0, &mut rng);
        let w = ConvWeights::new(
            Tensor::full(&[1, 1, 1, 1], 1.0),
            Tensor::zeros(&[1]),
            1,
            0,
        )
        .unwrap();
        assert_eq!(conv2d(&x, &w).unwrap().data(), x.data());
    }

    #[test]
    fn ones_kernel_on_constant_input_sums_the_window() {
        let c = 0.75;
        let x = Tensor::full(&[1, 5, 5], c);
        let w = ConvWeights::new(Tensor::full(&[1, 1, 3, 3], 1.0), Tensor::zeros(&[1]), 1, 1).unwrap();
        let y = conv2d(&x, &w).unwrap();
        assert_eq!(y.at3(0, 2, 2), 9.0 * c);
        // corners only see four in-bounds taps
        assert_eq!(y.at3(0, 0, 0), 4.0 * c);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = ConvWeights::he_normal(3, 2, 3, 3, 1, 1, &mut rng);
        let y = conv2d(&Tensor::zeros(&[2, 4, 4]), &w).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_direct_summation_with_stride_and_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let x = Tensor::randn(&[3, 7, 6], 1.0, &mut rng);
            let mut w = ConvWeights::he_normal(4, 3, 3, 3, stride, pad, &mut rng);
            w.bias = Tensor::randn(&[4], 1.0, &mut rng);
            let got = conv2d(&x, &w).unwrap();
            let want = direct_conv(&x, &w);
            assert!(got.max_abs_diff(&want) < 1e-12, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn shape_errors_are_descriptive() {
        let w = ConvWeights::zeros(2, 3, 3, 3, 1, 0);
        let err = conv2d(&Tensor::zeros(&[2, 5, 5]), &w).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
        let err = conv2d(&Tensor::zeros(&[3, 2, 2]), &w).unwrap_err();
        assert!(err.to_string().contains("does not fit"), "{err}");
        assert!(ConvWeights::new(Tensor::zeros(&[2, 3, 3, 3]), Tensor::zeros(&[3]), 1, 0).is_err());
        assert!(ConvWeights::new(Tensor::zeros(&[2, 3, 3, 3]), Tensor::zeros(&[2]), 0, 0).is_err());
    }

    #[test]
    fn linear_in_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let x1 = Tensor::randn(&[2, 6, 6], 1.0, &mut rng);
            let x2 = Tensor::randn(&[2, 6, 6], 1.0, &mut rng);
            let w = ConvWeights::he_normal(3, 2, 3, 3, 1, 1, &mut rng);
            let (a, b) = (1.7, -0.4);
            let mixed = x1.scale(a).add(&x2.scale(b)).unwrap();
            let lhs = conv2d(&mixed, &w).unwrap();
            let rhs = conv2d(&x1, &w)
                .unwrap()
                .scale(a)
                .add(&conv2d(&x2, &w).unwrap().scale(b))
                .unwrap();
            assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
        }
    }

    #[test]
    fn backward_rejects_wrong_upstream_shape() {
        let w = ConvWeights::zeros(2, 1, 3, 3, 1, 1);
        let x = Tensor::zeros(&[1, 4, 4]);
        assert!(conv2d_backward(&x, &w, &Tensor::zeros(&[2, 3, 3])).is_err());
        let g = conv2d_backward(&x, &w, &Tensor::zeros(&[2, 4, 4])).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
    }
}
