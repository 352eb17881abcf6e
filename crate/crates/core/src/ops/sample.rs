//! Four-neighbour bilinear sampling with a zero-padded border.
//!
//! Coordinates are `(x = column, y = row)` in pixel-centre units: `(0, 0)` is
//! the centre of the top-left pixel. A point strictly inside the band
//! `(-1, W) x (-1, H)` blends its in-bounds neighbours; out-of-bounds
//! neighbours read as zero, so the interpolant fades to zero at the band edge.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Flat plane offsets and blend weights of the (up to) four neighbours of a
/// sampling point, with the partial derivatives of each weight.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Taps {
    pub(crate) index: [usize; 4],
    pub(crate) weight: [f64; 4],
    pub(crate) dweight_dx: [f64; 4],
    pub(crate) dweight_dy: [f64; 4],
    pub(crate) valid: [bool; 4],
}

impl Taps {
    /// Taps for point `(x, y)` on an `h x w` plane, or `None` when the point
    /// lies outside the band and contributes nothing.
    #[inline]
    pub(crate) fn at(h: usize, w: usize, x: f64, y: f64) -> Option<Taps> {
        if !(y > -1.0 && y < h as f64 && x > -1.0 && x < w as f64) {
            return None;
        }
        let y0 = y.floor();
        let x0 = x.floor();
        let ly = y - y0;
        let lx = x - x0;
        let hy = 1.0 - ly;
        let hx = 1.0 - lx;
        let (y0, x0) = (y0 as isize, x0 as isize);
        let corners = [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)];
        let mut taps = Taps {
            index: [0; 4],
            weight: [hy * hx, hy * lx, ly * hx, ly * lx],
            dweight_dx: [-hy, hy, -ly, ly],
            dweight_dy: [-hx, -lx, hx, lx],
            valid: [false; 4],
        };
        for (k, &(cy, cx)) in corners.iter().enumerate() {
            if cy >= 0 && cx >= 0 && (cy as usize) < h && (cx as usize) < w {
                taps.valid[k] = true;
                taps.index[k] = cy as usize * w + cx as usize;
            }
        }
        Some(taps)
    }

    #[inline]
    pub(crate) fn sample(&self, plane: &[f64]) -> f64 {
        let mut acc = 0.0;
        for k in 0..4 {
            if self.valid[k] {
                acc += self.weight[k] * plane[self.index[k]];
            }
        }
        acc
    }

    /// `(d value / dx, d value / dy)` on `plane`.
    #[inline]
    pub(crate) fn coord_grad(&self, plane: &[f64]) -> (f64, f64) {
        let (mut gx, mut gy) = (0.0, 0.0);
        for k in 0..4 {
            if self.valid[k] {
                gx += self.dweight_dx[k] * plane[self.index[k]];
                gy += self.dweight_dy[k] * plane[self.index[k]];
            }
        }
        (gx, gy)
    }

    #[inline]
    pub(crate) fn scatter(&self, plane: &mut [f64], g: f64) {
        for k in 0..4 {
            if self.valid[k] {
                plane[self.index[k]] += self.weight[k] * g;
            }
        }
    }
}

/// Samples every channel of `input` (`[C, H, W]`) at `(x, y)`.
pub fn bilinear_sample(input: &Tensor, x: f64, y: f64) -> Result<Vec<f64>> {
    let (c, h, w) = input.dims3()?;
    let Some(taps) = Taps::at(h, w, x, y) else {
        return Ok(vec![0.0; c]);
    };
    Ok(input
        .data()
        .chunks(h * w)
        .map(|plane| taps.sample(plane))
        .collect())
}

/// Gradients of `sum_c upstream[c] * sample_c(x, y)` with respect to the
/// feature values and to the sampling coordinates.
#[derive(Debug, Clone)]
pub struct SampleGrads {
    pub input: Tensor,
    pub x: f64,
    pub y: f64,
}

pub fn bilinear_sample_backward(input: &Tensor, x: f64, y: f64, upstream: &[f64]) -> Result<SampleGrads> {
    let (c, h, w) = input.dims3()?;
    if upstream.len() != c {
        return Err(Error::shape(
            "bilinear_sample_backward",
            format!("upstream has {} entries for {c} channels", upstream.len()),
        ));
    }
    let mut dinput = vec![0.0; c * h * w];
    let (mut gx, mut gy) = (0.0, 0.0);
    if let Some(taps) = Taps::at(h, w, x, y) {
        for (ci, (&g, plane)) in upstream.iter().zip(input.data().chunks(h * w)).enumerate() {
            taps.scatter(&mut dinput[ci * h * w..(ci + 1) * h * w], g);
            let (px, py) = taps.coord_grad(plane);
            gx += g * px;
            gy += g * py;
        }
    }
    Ok(SampleGrads {
        input: Tensor::new(input.shape(), dinput)?,
        x: gx,
        y: gy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> Tensor {
        Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn integer_and_centre_points() {
        let t = square();
        assert_eq!(bilinear_sample(&t, 0.0, 0.0).unwrap(), vec![1.0]);
        assert_eq!(bilinear_sample(&t, 0.5, 0.5).unwrap(), vec![2.5]);
        // x is the column: (1, 0) is the top-right pixel
        assert_eq!(bilinear_sample(&t, 1.0, 0.0).unwrap(), vec![2.0]);
        assert_eq!(bilinear_sample(&t, 0.0, 1.0).unwrap(), vec![3.0]);
    }

    #[test]
    fn outside_band_reads_zero_and_border_fades() {
        let t = square();
        assert_eq!(bilinear_sample(&t, -1.0, 0.0).unwrap(), vec![0.0]);
        assert_eq!(bilinear_sample(&t, 0.0, 2.0).unwrap(), vec![0.0]);
        assert_eq!(bilinear_sample(&t, 1e3, -1e3).unwrap(), vec![0.0]);
        // halfway into the padding: half of the border pixel
        assert_eq!(bilinear_sample(&t, -0.5, 0.0).unwrap(), vec![0.5]);
        assert_eq!(bilinear_sample(&t, 1.5, 1.0).unwrap(), vec![2.0]);
    }

    #[test]
    fn coordinate_gradient_on_affine_field_is_exact() {
        let (a, b, c) = (0.3, -1.25, 2.5);
        let t = Tensor::from_fn(&[1, 6, 7], |i| {
            let (y, x) = ((i / 7) as f64, (i % 7) as f64);
            a + b * x + c * y
        });
        for &(x, y) in &[(0.0, 0.0), (2.3, 4.1), (5.99, 0.5), (3.0, 2.0)] {
            let g = bilinear_sample_backward(&t, x, y, &[1.0]).unwrap();
            assert!((g.x - b).abs() <= 1e-12, "{x},{y}: {}", g.x);
            assert!((g.y - c).abs() <= 1e-12, "{x},{y}: {}", g.y);
            let v = bilinear_sample(&t, x, y).unwrap()[0];
            assert!((v - (a + b * x + c * y)).abs() <= 1e-12);
        }
    }

    #[test]
    fn feature_gradient_weights_sum_to_one_inside() {
        let t = Tensor::zeros(&[2, 4, 4]);
        let g = bilinear_sample_backward(&t, 1.3, 2.6, &[1.0, 2.0]).unwrap();
        let per_channel: Vec<f64> = g.input.data().chunks(16).map(|p| p.iter().sum()).collect();
        assert!((per_channel[0] - 1.0).abs() < 1e-12);
        assert!((per_channel[1] - 2.0).abs() < 1e-12);
        assert!(bilinear_sample_backward(&t, 0.0, 0.0, &[1.0]).is_err());
    }
}
