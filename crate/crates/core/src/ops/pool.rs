//! Max/average pooling: windowed, global (per channel) and across channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Avg,
}

fn window_output(op: &'static str, h: usize, w: usize, window: usize, stride: usize) -> Result<(usize, usize)> {
    if window == 0 || stride == 0 {
        return Err(Error::invalid("window", "window and stride must be at least 1"));
    }
    if window > h || window > w {
        return Err(Error::shape(
            op,
            format!("window {window} larger than the {h}x{w} input"),
        ));
    }
    Ok(((h - window) / stride + 1, (w - window) / stride + 1))
}

/// Per-channel pooling over `window x window` patches, no padding.
pub fn pool2d(input: &Tensor, mode: PoolMode, window: usize, stride: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let (oh, ow) = window_output("pool2d", h, w, window, stride)?;
    let data = input.data();
    let area = (window * window) as f64;
    Ok(Tensor::from_fn(&[c, oh, ow], |idx| {
        let ci = idx / (oh * ow);
        let oy = (idx / ow) % oh;
        let ox = idx % ow;
        let base = ci * h * w;
        let mut acc = match mode {
            PoolMode::Max => f64::NEG_INFINITY,
            PoolMode::Avg => 0.0,
        };
        for i in 0..window {
            for j in 0..window {
                let v = data[base + (oy * stride + i) * w + ox * stride + j];
                match mode {
                    PoolMode::Max => acc = acc.max(v),
                    PoolMode::Avg => acc += v,
                }
            }
        }
        match mode {
            PoolMode::Max => acc,
            PoolMode::Avg => acc / area,
        }
    }))
}

pub fn pool2d_backward(
    input: &Tensor,
    mode: PoolMode,
    window: usize,
    stride: usize,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let (oh, ow) = window_output("pool2d_backward", h, w, window, stride)?;
    if grad_out.shape() != [c, oh, ow] {
        return Err(Error::shape(
            "pool2d_backward",
            format!("upstream {:?} vs output [{c}, {oh}, {ow}]", grad_out.shape()),
        ));
    }
    let data = input.data();
    let mut grad = vec![0.0; c * h * w];
    let area = (window * window) as f64;
    for ci in 0..c {
        let base = ci * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out.data()[(ci * oh + oy) * ow + ox];
                match mode {
                    PoolMode::Avg => {
                        for i in 0..window {
                            for j in 0..window {
                                grad[base + (oy * stride + i) * w + ox * stride + j] += g / area;
                            }
                        }
                    }
                    PoolMode::Max => {
                        // first maximum wins ties, matching the forward scan order
                        let mut best = (f64::NEG_INFINITY, 0);
                        for i in 0..window {
                            for j in 0..window {
                                let at = base + (oy * stride + i) * w + ox * stride + j;
                                if data[at] > best.0 {
                                    best = (data[at], at);
                                }
                            }
                        }
                        grad[best.1] += g;
                    }
                }
            }
        }
    }
    Tensor::new(input.shape(), grad)
}

/// Reduces each channel's `H x W` plane to one value: `[C, H, W] -> [C, 1, 1]`.
pub fn global_pool(input: &Tensor, mode: PoolMode) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let vals = input
        .data()
        .chunks(h * w)
        .map(|plane| reduce(plane, mode))
        .collect();
    Tensor::new(&[c, 1, 1], vals)
}

pub fn global_pool_backward(input: &Tensor, mode: PoolMode, grad_out: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if grad_out.len() != c {
        return Err(Error::shape(
            "global_pool_backward",
            format!("upstream {:?} for {c} channels", grad_out.shape()),
        ));
    }
    let mut grad = vec![0.0; c * h * w];
    for (ci, plane) in input.data().chunks(h * w).enumerate() {
        let g = grad_out.data()[ci];
        let out = &mut grad[ci * h * w..(ci + 1) * h * w];
        match mode {
            PoolMode::Avg => out.iter_mut().for_each(|v| *v = g / (h * w) as f64),
            PoolMode::Max => out[argmax(plane)] = g,
        }
    }
    Tensor::new(input.shape(), grad)
}

/// Reduces across channels at every location: `[C, H, W] -> [1, H, W]`.
pub fn channel_pool(input: &Tensor, mode: PoolMode) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let data = input.data();
    let mut column = vec![0.0; c];
    Ok(Tensor::from_fn(&[1, h, w], |p| {
        for (ci, v) in column.iter_mut().enumerate() {
            *v = data[ci * h * w + p];
        }
        reduce(&column, mode)
    }))
}

pub fn channel_pool_backward(input: &Tensor, mode: PoolMode, grad_out: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if grad_out.shape() != [1, h, w] {
        return Err(Error::shape(
            "channel_pool_backward",
            format!("upstream {:?} vs [1, {h}, {w}]", grad_out.shape()),
        ));
    }
    let data = input.data();
    let mut grad = vec![0.0; c * h * w];
    let mut column = vec![0.0; c];
    for p in 0..h * w {
        let g = grad_out.data()[p];
        match mode {
            PoolMode::Avg => {
                for ci in 0..c {
                    grad[ci * h * w + p] = g / c as f64;
                }
            }
            PoolMode::Max => {
                for (ci, v) in column.iter_mut().enumerate() {
                    *v = data[ci * h * w + p];
                }
                grad[argmax(&column) * h * w + p] = g;
            }
        }
    }
    Tensor::new(input.shape(), grad)
}

fn reduce(values: &[f64], mode: PoolMode) -> f64 {
    match mode {
        PoolMode::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        PoolMode::Avg => values.iter().sum::<f64>() / values.len() as f64,
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn global_pools_of_small_map() {
        let t = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_pool(&t, PoolMode::Avg).unwrap().data(), &[2.5]);
        assert_eq!(global_pool(&t, PoolMode::Max).unwrap().data(), &[4.0]);
        // a full-size window is the same as a global pool
        assert_eq!(pool2d(&t, PoolMode::Avg, 2, 2).unwrap().data(), &[2.5]);
    }

    #[test]
    fn constant_input_is_preserved_by_both_modes() {
        let t = Tensor::full(&[3, 4, 6], -1.75);
        for mode in [PoolMode::Avg, PoolMode::Max] {
            assert!(pool2d(&t, mode, 2, 2).unwrap().data().iter().all(|&v| v == -1.75));
            assert!(global_pool(&t, mode).unwrap().data().iter().all(|&v| v == -1.75));
            assert!(channel_pool(&t, mode).unwrap().data().iter().all(|&v| v == -1.75));
        }
    }

    #[test]
    fn oversized_window_is_rejected() {
        let t = Tensor::zeros(&[1, 3, 3]);
        assert!(pool2d(&t, PoolMode::Max, 4, 1).is_err());
        assert!(pool2d(&t, PoolMode::Max, 0, 1).is_err());
    }

    #[test]
    fn max_backward_routes_to_argmax() {
        let t = Tensor::new(&[1, 2, 2], vec![1.0, 5.0, 3.0, 4.0]).unwrap();
        let g = global_pool_backward(&t, PoolMode::Max, &Tensor::full(&[1, 1, 1], 2.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 2.0, 0.0, 0.0]);
        let g = pool2d_backward(&t, PoolMode::Max, 2, 1, &Tensor::full(&[1, 1, 1], 2.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn channel_pool_reduces_across_channels() {
        let t = Tensor::new(&[2, 1, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        assert_eq!(channel_pool(&t, PoolMode::Max).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(channel_pool(&t, PoolMode::Avg).unwrap().data(), &[2.0, 3.0]);
    }
}
