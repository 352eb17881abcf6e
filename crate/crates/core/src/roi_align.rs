//! RoI Align: quantisation-free pooling of a region into a fixed grid.
//!
//! The RoI is mapped into feature coordinates by `spatial_scale` without any
//! rounding and split into `out_h x out_w` equal bins. Each bin is sampled on
//! a regular `sampling_ratio x sampling_ratio` sub-grid at the sub-cell
//! centres; every sample is a bilinear read and the samples are reduced by
//! average or max. RoI edges are used as given (no half-pixel shift), in the
//! same pixel-centre convention as [`crate::ops::bilinear_sample`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::ops::sample::Taps;
use crate::ops::PoolMode;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoiAlignConfig {
    pub out_h: usize,
    pub out_w: usize,
    pub sampling_ratio: usize,
    pub pool_mode: PoolMode,
    pub spatial_scale: f64,
}

impl Default for RoiAlignConfig {
    fn default() -> Self {
        RoiAlignConfig {
            out_h: 7,
            out_w: 7,
            sampling_ratio: 2,
            pool_mode: PoolMode::Avg,
            spatial_scale: 1.0,
        }
    }
}

impl RoiAlignConfig {
    pub fn with_scale(mut self, spatial_scale: f64) -> Self {
        self.spatial_scale = spatial_scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_h == 0 || self.out_w == 0 {
            return Err(Error::invalid("out_h/out_w", "output grid must be non-empty"));
        }
        if self.sampling_ratio == 0 {
            return Err(Error::invalid("sampling_ratio", "must be at least 1"));
        }
        if !(self.spatial_scale > 0.0 && self.spatial_scale.is_finite()) {
            return Err(Error::invalid(
                "spatial_scale",
                format!("must be positive, got {}", self.spatial_scale),
            ));
        }
        Ok(())
    }

    /// Sampling points `(x, y)` of bin `(by, bx)` in feature coordinates.
    pub fn bin_samples(&self, roi: &BBox, by: usize, bx: usize) -> Vec<(f64, f64)> {
        let s = self.spatial_scale;
        let (x1, y1) = (roi.x1 * s, roi.y1 * s);
        let bin_w = (roi.x2 * s - x1) / self.out_w as f64;
        let bin_h = (roi.y2 * s - y1) / self.out_h as f64;
        let r = self.sampling_ratio;
        let mut pts = Vec::with_capacity(r * r);
        for iy in 0..r {
            let y = y1 + by as f64 * bin_h + (iy as f64 + 0.5) * bin_h / r as f64;
            for ix in 0..r {
                let x = x1 + bx as f64 * bin_w + (ix as f64 + 0.5) * bin_w / r as f64;
                pts.push((x, y));
            }
        }
        pts
    }
}

fn check(feature: &Tensor, roi: &BBox, cfg: &RoiAlignConfig) -> Result<(usize, usize, usize)> {
    cfg.validate()?;
    roi.validate().map_err(|e| Error::invalid("roi", e))?;
    feature.dims3()
}

/// Pools `roi` out of `feature` (`[C, H, W]`) into `[C, out_h, out_w]`.
pub fn roi_align(feature: &Tensor, roi: &BBox, cfg: &RoiAlignConfig) -> Result<Tensor> {
    let (c, h, w) = check(feature, roi, cfg)?;
    let bins = cfg.out_h * cfg.out_w;
    let mut out = vec![0.0; c * bins];
    let mut acc = vec![0.0; c];
    for by in 0..cfg.out_h {
        for bx in 0..cfg.out_w {
            let pts = cfg.bin_samples(roi, by, bx);
            match cfg.pool_mode {
                PoolMode::Avg => acc.fill(0.0),
                PoolMode::Max => acc.fill(f64::NEG_INFINITY),
            }
            for &(x, y) in &pts {
                let taps = Taps::at(h, w, x, y);
                for (ci, plane) in feature.data().chunks(h * w).enumerate() {
                    let v = taps.map_or(0.0, |t| t.sample(plane));
                    match cfg.pool_mode {
                        PoolMode::Avg => acc[ci] += v,
                        PoolMode::Max => acc[ci] = acc[ci].max(v),
                    }
                }
            }
            let bin = by * cfg.out_w + bx;
            for ci in 0..c {
                out[ci * bins + bin] = match cfg.pool_mode {
                    PoolMode::Avg => acc[ci] / pts.len() as f64,
                    PoolMode::Max => acc[ci],
                };
            }
        }
    }
    Tensor::new(&[c, cfg.out_h, cfg.out_w], out)
}

/// Adds the gradient of `<upstream, roi_align(feature, roi)>` with respect to
/// `feature` into `grad` (same shape as `feature`).
pub(crate) fn roi_align_accumulate(
    feature: &Tensor,
    roi: &BBox,
    cfg: &RoiAlignConfig,
    upstream: &[f64],
    grad: &mut [f64],
) -> Result<()> {
    let (c, h, w) = check(feature, roi, cfg)?;
    let bins = cfg.out_h * cfg.out_w;
    if upstream.len() != c * bins {
        return Err(Error::shape(
            "roi_align_backward",
            format!(
                "upstream has {} values, expected [{c}, {}, {}]",
                upstream.len(),
                cfg.out_h,
                cfg.out_w
            ),
        ));
    }
    for by in 0..cfg.out_h {
        for bx in 0..cfg.out_w {
            let bin = by * cfg.out_w + bx;
            let pts = cfg.bin_samples(roi, by, bx);
            let taps: Vec<Option<Taps>> = pts.iter().map(|&(x, y)| Taps::at(h, w, x, y)).collect();
            for ci in 0..c {
                let g = upstream[ci * bins + bin];
                if g == 0.0 {
                    continue;
                }
                let plane = &feature.data()[ci * h * w..(ci + 1) * h * w];
                let dplane = &mut grad[ci * h * w..(ci + 1) * h * w];
                match cfg.pool_mode {
                    PoolMode::Avg => {
                        let share = g / pts.len() as f64;
                        for t in taps.iter().flatten() {
                            t.scatter(dplane, share);
                        }
                    }
                    PoolMode::Max => {
                        // route to the first maximising sample
                        let mut best = (f64::NEG_INFINITY, 0);
                        for (k, t) in taps.iter().enumerate() {
                            let v = t.map_or(0.0, |t| t.sample(plane));
                            if v > best.0 {
                                best = (v, k);
                            }
                        }
                        if let Some(t) = &taps[best.1] {
                            t.scatter(dplane, g);
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Gradient with respect to the feature map.
pub fn roi_align_backward(feature: &Tensor, roi: &BBox, cfg: &RoiAlignConfig, upstream: &Tensor) -> Result<Tensor> {
    let mut grad = vec![0.0; feature.len()];
    roi_align_accumulate(feature, roi, cfg, upstream.data(), &mut grad)?;
    Tensor::new(feature.shape(), grad)
}

/// Maps RoIs to pyramid levels with `k = floor(k0 + log2(sqrt(area) / s0))`,
/// clamped to `[min_level, max_level]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LevelMapper {
    pub canonical_size: f64,
    pub canonical_level: usize,
    pub min_level: usize,
    pub max_level: usize,
}

impl Default for LevelMapper {
    fn default() -> Self {
        LevelMapper {
            canonical_size: 224.0,
            canonical_level: 4,
            min_level: 2,
            max_level: 5,
        }
    }
}

impl LevelMapper {
    pub fn level(&self, roi: &BBox) -> usize {
        let k = (self.canonical_level as f64 + (roi.area().sqrt() / self.canonical_size).log2()).floor();
        let k = if k.is_nan() { self.min_level as f64 } else { k };
        k.clamp(self.min_level as f64, self.max_level as f64) as usize
    }
}

/// Pyramid level in `[2, 5]` for a RoI in image coordinates.
pub fn assign_roi_level(roi: &BBox) -> usize {
    LevelMapper::default().level(roi)
}
