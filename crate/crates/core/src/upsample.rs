//! Bilinear resizing with the half-pixel (align-corners = false) convention.
//!
//! Output cell `d` reads source coordinate `(d + 0.5) * in / out - 0.5`,
//! clamped at the borders.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `(lower index, upper index, weight of upper)` for each output position.
fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

fn check(input: &Tensor, out_h: usize, out_w: usize) -> Result<(usize, usize, usize)> {
    let (c, h, w) = input.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("out_h/out_w", "target size must be non-zero"));
    }
    if out_h < h || out_w < w {
        return Err(Error::invalid(
            "out_h/out_w",
            format!("upsampling target {out_h}x{out_w} is smaller than the {h}x{w} input"),
        ));
    }
    Ok((c, h, w))
}

/// Resizes `[C, h, w]` to `[C, out_h, out_w]`; targets must not shrink.
pub fn bilinear_upsample(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = check(input, out_h, out_w)?;
    let rows = axis_taps(h, out_h);
    let cols = axis_taps(w, out_w);
    let data = input.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ci in 0..c {
        let plane = &data[ci * h * w..(ci + 1) * h * w];
        for &(y0, y1, ly) in &rows {
            for &(x0, x1, lx) in &cols {
                let top = plane[y0 * w + x0] * (1.0 - lx) + plane[y0 * w + x1] * lx;
                let bottom = plane[y1 * w + x0] * (1.0 - lx) + plane[y1 * w + x1] * lx;
                out.push(top * (1.0 - ly) + bottom * ly);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Gradient of [`bilinear_upsample`] with respect to its input.
pub fn bilinear_upsample_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = input_shape else {
        return Err(Error::shape("bilinear_upsample_backward", format!("input shape {input_shape:?}")));
    };
    let (gc, out_h, out_w) = grad_out.dims3()?;
    if gc != c {
        return Err(Error::shape(
            "bilinear_upsample_backward",
            format!("upstream has {gc} channels for a {c}-channel input"),
        ));
    }
    let rows = axis_taps(h, out_h);
    let cols = axis_taps(w, out_w);
    let mut grad = vec![0.0; c * h * w];
    let g = grad_out.data();
    for ci in 0..c {
        let plane = &mut grad[ci * h * w..(ci + 1) * h * w];
        for (oy, &(y0, y1, ly)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in cols.iter().enumerate() {
                let v = g[(ci * out_h + oy) * out_w + ox];
                plane[y0 * w + x0] += v * (1.0 - ly) * (1.0 - lx);
                plane[y0 * w + x1] += v * (1.0 - ly) * lx;
                plane[y1 * w + x0] += v * ly * (1.0 - lx);
                plane[y1 * w + x1] += v * ly * lx;
            }
        }
    }
    Tensor::new(input_shape, grad)
}
