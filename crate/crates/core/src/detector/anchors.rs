//! Anchor tiling and the `(dx, dy, dw, dh)` box parameterisation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    /// Base size for each pyramid level, finest first.
    pub sizes: Vec<f64>,
    /// Height / width ratios.
    pub ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            sizes: vec![32.0, 64.0, 128.0, 256.0],
            ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.ratios.is_empty() {
            return Err(Error::Config("anchor sizes and ratios must be non-empty".into()));
        }
        if self.sizes.iter().chain(&self.ratios).any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config("anchor sizes and ratios must be positive".into()));
        }
        Ok(())
    }
}

/// One feature map to tile: its size, stride and the anchor sizes placed at
/// each location.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorLevel {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub sizes: Vec<f64>,
}

impl AnchorLevel {
    pub fn per_location(&self, ratios: &[f64]) -> usize {
        self.sizes.len() * ratios.len()
    }
}

/// Shapes `(w, h)` of the cell anchors, sizes outer and ratios inner.
fn cell_shapes(sizes: &[f64], ratios: &[f64]) -> Vec<(f64, f64)> {
    sizes
        .iter()
        .flat_map(|&s| ratios.iter().map(move |&r| (s / r.sqrt(), s * r.sqrt())))
        .collect()
}

/// Anchors per level, ordered row, column, then anchor index. Each anchor
/// is centred on `((col + 0.5) stride, (row + 0.5) stride)`.
pub fn generate_anchors(levels: &[AnchorLevel], ratios: &[f64]) -> Vec<Vec<BBox>> {
    levels
        .iter()
        .map(|lv| {
            let shapes = cell_shapes(&lv.sizes, ratios);
            let s = lv.stride as f64;
            let mut out = Vec::with_capacity(lv.height * lv.width * shapes.len());
            for i in 0..lv.height {
                for j in 0..lv.width {
                    let (cx, cy) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
                    for &(w, h) in &shapes {
                        out.push(BBox {
                            x1: cx - 0.5 * w,
                            y1: cy - 0.5 * h,
                            x2: cx + 0.5 * w,
                            y2: cy + 0.5 * h,
                            score: None,
                            label: None,
                        });
                    }
                }
            }
            out
        })
        .collect()
}

/// Largest allowed log-scale delta when decoding (boxes grow at most
/// 1000/16 times).
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCoder {
    pub weights: [f64; 4],
}

impl BoxCoder {
    pub const fn new(weights: [f64; 4]) -> Self {
        BoxCoder { weights }
    }

    /// Deltas that move `anchor` onto `target`.
    pub fn encode(&self, anchor: &BBox, target: &BBox) -> [f64; 4] {
        let (ax, ay) = anchor.center();
        let (tx, ty) = target.center();
        let (aw, ah) = (anchor.width(), anchor.height());
        let [wx, wy, ww, wh] = self.weights;
        [
            wx * (tx - ax) / aw,
            wy * (ty - ay) / ah,
            ww * (target.width() / aw).ln(),
            wh * (target.height() / ah).ln(),
        ]
    }

    pub fn decode(&self, anchor: &BBox, d: &[f64; 4]) -> BBox {
        let (ax, ay) = anchor.center();
        let (aw, ah) = (anchor.width(), anchor.height());
        let [wx, wy, ww, wh] = self.weights;
        let cx = ax + d[0] / wx * aw;
        let cy = ay + d[1] / wy * ah;
        let w = aw * (d[2] / ww).min(MAX_LOG_SCALE).exp();
        let h = ah * (d[3] / wh).min(MAX_LOG_SCALE).exp();
        BBox {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
            score: None,
            label: None,
        }
    }
}
