//! Seeded synthetic defect images: filled rectangles ("patches") and thin
//! diagonal lines ("scratches") on a noisy dark background.
//!
//! Every image is quantised to 8 bits before its boxes are measured, so the
//! recorded boxes are exactly the pixel extent of each rendered object.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::voc::{AnnotatedObject, Annotation};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

/// Background pixels stay at or below this level; objects at or above
/// [`OBJECT_FLOOR`].
pub const BACKGROUND_CEIL: f64 = 0.45;
pub const OBJECT_FLOOR: f64 = 0.6;
/// Pixels within this distance of a scratch's centre line are painted.
const SCRATCH_HALF_WIDTH: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub classes: Vec<String>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_side: usize,
    pub max_side: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Free pixels kept between any two objects.
    pub margin: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            width: 96,
            height: 96,
            classes: vec!["patches".into(), "scratches".into()],
            min_objects: 1,
            max_objects: 3,
            min_side: 6,
            max_side: 24,
            noise: 0.03,
            margin: 3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("synthetic spec needs at least one class".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects exceeds max_objects".into()));
        }
        if self.min_side < 6 || self.min_side > self.max_side {
            return Err(Error::Config(format!(
                "object sides must satisfy 6 <= min_side <= max_side, got {}..{}",
                self.min_side, self.max_side
            )));
        }
        if self.max_side + 2 * self.margin >= self.width.min(self.height) {
            return Err(Error::Config("objects do not fit in the image".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be non-negative, got {}", self.noise)));
        }
        Ok(())
    }
}

/// One generated image with its annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: Tensor,
    pub annotation: Annotation,
}

/// Known shape identities; other class names cycle through these.
fn shape_of(class: &str, index: usize) -> bool {
    match class {
        "scratches" => true,
        "patches" => false,
        _ => index % 2 == 1,
    }
}

fn separated(a: &BBox, b: &BBox, margin: f64) -> bool {
    a.x2 + margin <= b.x1 || b.x2 + margin <= a.x1 || a.y2 + margin <= b.y1 || b.y2 + margin <= a.y1
}

/// Rasterises one object into a mask over its placement rectangle.
fn render_object(rng: &mut ChaCha8Rng, scratch: bool, spec: &SyntheticSpec) -> (usize, usize, Vec<bool>) {
    let w = rng.random_range(spec.min_side..=spec.max_side);
    let h = if scratch {
        rng.random_range(spec.min_side..=spec.max_side)
    } else {
        // near-square blobs
        let lo = spec.min_side.max(w.saturating_sub(4));
        let hi = spec.max_side.min(w + 4);
        rng.random_range(lo..=hi)
    };
    if !scratch {
        return (w, h, vec![true; w * h]);
    }
    // segment between opposite corners, inset so the line fills the box
    let flip = rng.random_bool(0.5);
    let (x0, x1) = (0.5, w as f64 - 0.5);
    let (y0, y1) = if flip { (h as f64 - 0.5, 0.5) } else { (0.5, h as f64 - 0.5) };
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    let mask = (0..w * h)
        .map(|i| {
            let (px, py) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
            let t = (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0);
            let (cx, cy) = (x0 + t * dx, y0 + t * dy);
            ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() <= SCRATCH_HALF_WIDTH
        })
        .collect();
    (w, h, mask)
}

fn generate_one(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, id: String, next_class: &mut usize) -> SyntheticSample {
    let (w, h) = (spec.width, spec.height);
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("finite noise");
    let base = rng.random_range(0.1..0.3);
    let mut pixels: Vec<f64> = (0..w * h)
        .map(|_| (base + noise.sample(rng)).clamp(0.05, BACKGROUND_CEIL))
        .collect();
    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut placed: Vec<(usize, BBox)> = Vec::new();
    for _ in 0..count {
        let class = *next_class % spec.classes.len();
        let scratch = shape_of(&spec.classes[class], class);
        let mut done = false;
        for _attempt in 0..100 {
            let (ow, oh, mask) = render_object(rng, scratch, spec);
            let m = spec.margin;
            let x = rng.random_range(m..=w - ow - m);
            let y = rng.random_range(m..=h - oh - m);
            // extent of the painted pixels
            let (mut minx, mut miny, mut maxx, mut maxy) = (usize::MAX, usize::MAX, 0, 0);
            for (i, &on) in mask.iter().enumerate() {
                if on {
                    let (px, py) = (x + i % ow, y + i / ow);
                    minx = minx.min(px);
                    miny = miny.min(py);
                    maxx = maxx.max(px);
                    maxy = maxy.max(py);
                }
            }
            if maxx + 1 - minx < spec.min_side || maxy + 1 - miny < spec.min_side {
                continue;
            }
            let bbox = BBox::new(minx as f64, miny as f64, (maxx + 1) as f64, (maxy + 1) as f64)
                .expect("non-empty mask")
                .with_label(class);
            if !placed.iter().all(|(_, b)| separated(b, &bbox, m as f64)) {
                continue;
            }
            let level = rng.random_range(0.7..0.95);
            for (i, &on) in mask.iter().enumerate() {
                if on {
                    let p = (y + i / ow) * w + x + i % ow;
                    pixels[p] = (level + noise.sample(rng)).clamp(OBJECT_FLOOR, 1.0);
                }
            }
            placed.push((class, bbox));
            done = true;
            break;
        }
        if done {
            *next_class += 1;
        }
    }
    for p in &mut pixels {
        *p = super::image::quantize(*p) as f64 / 255.0;
    }
    SyntheticSample {
        image: Tensor::new(&[1, h, w], pixels).expect("image shape"),
        annotation: Annotation {
            id,
            width: w,
            height: h,
            objects: placed
                .into_iter()
                .map(|(c, bbox)| AnnotatedObject {
                    name: spec.classes[c].clone(),
                    bbox,
                })
                .collect(),
        },
    }
}

/// Generates `n` images. The output depends only on `spec` (including its
/// seed) and `n`; classes are assigned round-robin across the whole set.
pub fn generate_synthetic(spec: &SyntheticSpec, n: usize) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut next_class = 0;
    Ok((0..n)
        .map(|i| generate_one(&mut rng, spec, format!("syn_{i:05}"), &mut next_class))
        .collect())
}
