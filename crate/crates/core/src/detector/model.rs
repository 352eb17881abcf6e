//! Parameter layout and tape forward pass of the two-stage detector.
//!
//! Backbone: a stride-4 stem of two 3x3 stride-2 convolutions, then four
//! residual stages (`C2..C5`). Each block is `conv3x3 -> relu -> conv3x3`
//! (deformable in the configured stages), optionally CBAM, plus the
//! shortcut, then relu. The neck is the feature pyramid, or `C4` alone when
//! the pyramid is switched off. The RPN shares one 3x3 conv across levels;
//! the box head is RoI Align followed by two fully connected layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::anchors::{generate_anchors, AnchorLevel};
use super::config::ModelConfig;
use crate::autograd::{RoiSource, Tape, Var};
use crate::cbam::{cbam_forward, CbamVars, CbamWeights};
use crate::error::{Error, Result};
use crate::fpn::{bound_laterals, fpn_forward, FpnWeights, LEVEL_STRIDES};
use crate::geometry::BBox;
use crate::ops::{Activation, ConvWeights};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::Tensor;

pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;
/// Initial scale of the last convolution in each residual branch, keeping
/// the un-normalised residual stack from amplifying its input.
pub const RESIDUAL_INIT_SCALE: f64 = 0.25;
/// Standard deviations of the output-layer initialisation.
pub const CLS_INIT_STD: f64 = 0.01;
pub const BOX_INIT_STD: f64 = 0.001;
/// Foreground probability the classifier biases start at when the focal
/// objective is on, so the many easy negatives do not swamp the first steps.
pub const FOCAL_PRIOR: f64 = 0.01;

const STRIDE_C4: usize = 16;

/// Trained (or initial) weights together with the architecture they fit.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn conv_names(prefix: &str) -> (String, String) {
    (format!("{prefix}.weight"), format!("{prefix}.bias"))
}

fn insert_conv(store: &mut ParamStore, prefix: &str, w: ConvWeights) {
    let (k, b) = conv_names(prefix);
    store.insert(k, w.kernel);
    store.insert(b, w.bias);
}

fn insert_linear(store: &mut ParamStore, prefix: &str, out: usize, inp: usize, std: f64, rng: &mut ChaCha8Rng) {
    let (k, b) = conv_names(prefix);
    store.insert(k, Tensor::randn(&[out, inp], std, rng));
    store.insert(b, Tensor::zeros(&[out]));
}

fn block_prefix(stage: usize, block: usize) -> String {
    format!("backbone.s{stage}.b{block}")
}

impl ModelConfig {
    fn uses_deform(&self, stage: usize) -> bool {
        self.toggles.dcn && self.backbone.deform_stages.contains(&stage)
    }

    /// Channel count of the maps seen by the RPN and the head.
    pub fn feature_channels(&self) -> usize {
        if self.toggles.fpn {
            self.pyramid_channels
        } else {
            self.backbone.stage_width(3)
        }
    }

    /// Anchors per location on every feature level.
    pub fn anchors_per_location(&self) -> usize {
        let per_size = self.anchors.ratios.len();
        if self.toggles.fpn {
            per_size
        } else {
            per_size * self.anchors.sizes.len()
        }
    }

    /// Feature levels (height, width, stride) for an input image.
    pub fn feature_levels(&self, height: usize, width: usize) -> Result<Vec<AnchorLevel>> {
        let mut levels = Vec::new();
        let (mut h, mut w) = (height, width);
        // stem halves twice, each later stage once
        let mut sizes = Vec::new();
        for _ in 0..2 {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        sizes.push((h, w));
        for _ in 1..4 {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
            sizes.push((h, w));
        }
        if self.toggles.fpn {
            for (i, &(h, w)) in sizes.iter().enumerate() {
                levels.push(AnchorLevel {
                    height: h,
                    width: w,
                    stride: LEVEL_STRIDES[i],
                    sizes: vec![self.anchors.sizes[i]],
                });
            }
        } else {
            let (h, w) = sizes[2];
            levels.push(AnchorLevel {
                height: h,
                width: w,
                stride: STRIDE_C4,
                sizes: self.anchors.sizes.clone(),
            });
        }
        if sizes.windows(2).any(|p| p[1].0 >= p[0].0 || p[1].1 >= p[0].1) {
            return Err(Error::invalid(
                "image",
                format!("{height}x{width} is too small for a four-level backbone"),
            ));
        }
        Ok(levels)
    }
}

impl Detector {
    /// Fresh weights drawn from a generator seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let b = &config.backbone;
        let mut p = ParamStore::new();
        let stem_mid = (b.base_width / 2).max(1);
        insert_conv(&mut p, "backbone.stem1", ConvWeights::he_normal(stem_mid, b.in_channels, 3, 3, 2, 1, rng));
        insert_conv(&mut p, "backbone.stem2", ConvWeights::he_normal(b.base_width, stem_mid, 3, 3, 2, 1, rng));
        let mut in_c = b.base_width;
        for stage in 1..=4 {
            let width = b.stage_width(stage);
            for block in 0..b.blocks_per_stage {
                let prefix = block_prefix(stage, block);
                let stride = if stage > 1 && block == 0 { 2 } else { 1 };
                insert_conv(&mut p, &format!("{prefix}.conv1"), ConvWeights::he_normal(width, in_c, 3, 3, stride, 1, rng));
                let mut conv2 = ConvWeights::he_normal(width, width, 3, 3, 1, 1, rng);
                conv2.kernel = conv2.kernel.scale(RESIDUAL_INIT_SCALE);
                insert_conv(&mut p, &format!("{prefix}.conv2"), conv2);
                if config.uses_deform(stage) {
                    insert_conv(&mut p, &format!("{prefix}.conv2.offset"), ConvWeights::zeros(18, width, 3, 3, 1, 1));
                }
                if config.toggles.cbam {
                    CbamWeights::random(width, b.cbam_reduction, b.cbam_mlp_bias, rng)?.insert_into(&mut p, &prefix);
                }
                if stride != 1 || in_c != width {
                    insert_conv(&mut p, &format!("{prefix}.shortcut"), ConvWeights::he_normal(width, in_c, 1, 1, stride, 0, rng));
                }
                in_c = width;
            }
        }
        let widths = [1, 2, 3, 4].map(|s| b.stage_width(s));
        if config.toggles.fpn {
            FpnWeights::random(widths, config.pyramid_channels, rng).insert_into(&mut p);
        }
        let fc = config.feature_channels();
        let a = config.anchors_per_location();
        insert_conv(&mut p, "rpn.conv", ConvWeights::he_normal(fc, fc, 3, 3, 1, 1, rng));
        let mut cls = ConvWeights::zeros(a, fc, 1, 1, 1, 0);
        cls.kernel = Tensor::randn(cls.kernel.shape(), CLS_INIT_STD, rng);
        let prior_bias = if config.toggles.focal {
            -((1.0 - FOCAL_PRIOR) / FOCAL_PRIOR).ln()
        } else {
            0.0
        };
        cls.bias = Tensor::full(cls.bias.shape(), prior_bias);
        insert_conv(&mut p, "rpn.cls", cls);
        let mut bx = ConvWeights::zeros(4 * a, fc, 1, 1, 1, 0);
        bx.kernel = Tensor::randn(bx.kernel.shape(), CLS_INIT_STD, rng);
        insert_conv(&mut p, "rpn.box", bx);
        let h = &config.head;
        let pooled = fc * h.roi_align.out_h * h.roi_align.out_w;
        insert_linear(&mut p, "head.fc1", h.fc_dim, pooled, (2.0 / pooled as f64).sqrt(), rng);
        insert_linear(&mut p, "head.fc2", h.fc_dim, h.fc_dim, (2.0 / h.fc_dim as f64).sqrt(), rng);
        insert_linear(&mut p, "head.cls", config.num_classes, h.fc_dim, CLS_INIT_STD, rng);
        insert_linear(&mut p, "head.box", 4, h.fc_dim, BOX_INIT_STD, rng);
        p.get_mut("head.cls.bias")?.data_mut().fill(prior_bias);
        Ok(Detector { config, params: p })
    }

    /// Pairs loaded weights with a config, checking that every parameter the
    /// architecture needs is present with the right shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Detector::new(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, the config expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if let Some(extra) = params.names().find(|n| !reference.params.contains(n)) {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}` for this config")));
        }
        Ok(Detector { config, params })
    }
}

/// Handles of the maps consumed by the RPN and head.
#[derive(Debug, Clone)]
pub struct Features {
    pub levels: Vec<Var>,
    pub strides: Vec<usize>,
}

fn conv(tape: &mut Tape, bound: &BoundParams, x: Var, prefix: &str, stride: usize, pad: usize) -> Result<Var> {
    let (k, b) = conv_names(prefix);
    tape.conv2d(x, bound.var(&k)?, bound.var(&b)?, stride, pad)
}

fn residual_block(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &ModelConfig,
    x: Var,
    stage: usize,
    block: usize,
) -> Result<Var> {
    let prefix = block_prefix(stage, block);
    let stride = if stage > 1 && block == 0 { 2 } else { 1 };
    let h = conv(tape, bound, x, &format!("{prefix}.conv1"), stride, 1)?;
    let h = tape.act(h, Activation::Relu)?;
    let c2 = format!("{prefix}.conv2");
    let h = if cfg.uses_deform(stage) {
        let off = conv(tape, bound, h, &format!("{c2}.offset"), 1, 1)?;
        tape.set_label(off, format!("{c2}.offsets"));
        let (k, b) = conv_names(&c2);
        tape.deform_conv2d(h, bound.var(&k)?, bound.var(&b)?, off, 1, 1)?
    } else {
        conv(tape, bound, h, &c2, 1, 1)?
    };
    let h = if cfg.toggles.cbam {
        let vars = CbamVars::from_bound(bound, &prefix, crate::ops::DEFAULT_LEAKY_SLOPE)?;
        cbam_forward(tape, h, &vars)?
    } else {
        h
    };
    let shortcut = format!("{prefix}.shortcut");
    let skip = if bound.opt(&format!("{shortcut}.weight")).is_some() {
        conv(tape, bound, x, &shortcut, stride, 0)?
    } else {
        x
    };
    let y = tape.add(h, skip)?;
    let y = tape.act(y, Activation::Relu)?;
    tape.set_label(y, prefix);
    Ok(y)
}

/// Backbone maps `C2..C5` for a normalised image already on the tape.
pub fn backbone_forward(tape: &mut Tape, bound: &BoundParams, cfg: &ModelConfig, image: Var) -> Result<Vec<Var>> {
    let x = conv(tape, bound, image, "backbone.stem1", 2, 1)?;
    let x = tape.act(x, Activation::Relu)?;
    let x = conv(tape, bound, x, "backbone.stem2", 2, 1)?;
    let mut x = tape.act(x, Activation::Relu)?;
    let mut maps = Vec::with_capacity(4);
    for stage in 1..=4 {
        for block in 0..cfg.backbone.blocks_per_stage {
            x = residual_block(tape, bound, cfg, x, stage, block)?;
        }
        tape.set_label(x, format!("backbone.c{}", stage + 1));
        maps.push(x);
    }
    Ok(maps)
}

/// Backbone plus neck for a raw `[C, H, W]` image in `[0, 1]`.
pub fn features_forward(tape: &mut Tape, bound: &BoundParams, cfg: &ModelConfig, image: &Tensor) -> Result<Features> {
    let (c, _, _) = image.dims3()?;
    if c != cfg.backbone.in_channels {
        return Err(Error::shape(
            "detector",
            format!("image has {c} channels, the backbone expects {}", cfg.backbone.in_channels),
        ));
    }
    let x = tape.leaf(image.map(|v| (v - PIXEL_MEAN) / PIXEL_STD));
    tape.set_label(x, "image");
    let c = backbone_forward(tape, bound, cfg, x)?;
    if cfg.toggles.fpn {
        let laterals = bound_laterals(bound)?;
        Ok(Features {
            levels: fpn_forward(tape, &c, &laterals)?,
            strides: LEVEL_STRIDES.to_vec(),
        })
    } else {
        Ok(Features {
            levels: vec![c[2]],
            strides: vec![STRIDE_C4],
        })
    }
}

/// `(kernel, bias)` handles of the RPN layers.
#[derive(Debug, Clone, Copy)]
pub struct RpnVars {
    pub conv: (Var, Var),
    pub cls: (Var, Var),
    pub bbox: (Var, Var),
}

impl RpnVars {
    pub fn from_bound(bound: &BoundParams) -> Result<Self> {
        let pair = |p: &str| -> Result<(Var, Var)> {
            let (k, b) = conv_names(p);
            Ok((bound.var(&k)?, bound.var(&b)?))
        };
        Ok(RpnVars {
            conv: pair("rpn.conv")?,
            cls: pair("rpn.cls")?,
            bbox: pair("rpn.box")?,
        })
    }
}

/// Per-level objectness logits `[A, H, W]` and deltas `[4A, H, W]`.
#[derive(Debug, Clone)]
pub struct RpnOut {
    pub objectness: Vec<Var>,
    pub deltas: Vec<Var>,
}

pub fn rpn_forward_tape(tape: &mut Tape, levels: &[Var], w: &RpnVars) -> Result<RpnOut> {
    let mut out = RpnOut {
        objectness: Vec::new(),
        deltas: Vec::new(),
    };
    for (i, &p) in levels.iter().enumerate() {
        let h = tape.conv2d(p, w.conv.0, w.conv.1, 1, 1)?;
        let h = tape.act(h, Activation::Relu)?;
        let o = tape.conv2d(h, w.cls.0, w.cls.1, 1, 0)?;
        let d = tape.conv2d(h, w.bbox.0, w.bbox.1, 1, 0)?;
        tape.set_label(o, format!("rpn.objectness.l{i}"));
        tape.set_label(d, format!("rpn.deltas.l{i}"));
        out.objectness.push(o);
        out.deltas.push(d);
    }
    Ok(out)
}

/// Flattens per-level RPN maps into anchor order (level, row, col, anchor).
pub fn flatten_rpn(tape: &Tape, out: &RpnOut) -> Result<(Vec<f64>, Vec<[f64; 4]>)> {
    let mut logits = Vec::new();
    let mut deltas = Vec::new();
    for (o, d) in out.objectness.iter().zip(&out.deltas) {
        let (o, d) = (tape.value(*o)?, tape.value(*d)?);
        let (a, h, w) = o.dims3()?;
        for i in 0..h {
            for j in 0..w {
                for k in 0..a {
                    logits.push(o.at3(k, i, j));
                    deltas.push(std::array::from_fn(|c| d.at3(4 * k + c, i, j)));
                }
            }
        }
    }
    Ok((logits, deltas))
}

/// Inverse of [`flatten_rpn`] for gradients: builds per-level seeds.
pub fn unflatten_rpn(tape: &Tape, out: &RpnOut, g_logits: &[f64], g_deltas: &[[f64; 4]]) -> Result<Vec<(Var, Tensor)>> {
    let mut seeds = Vec::new();
    let mut at = 0;
    for (ov, dv) in out.objectness.iter().zip(&out.deltas) {
        let (a, h, w) = tape.value(*ov)?.dims3()?;
        let mut go = Tensor::zeros(&[a, h, w]);
        let mut gd = Tensor::zeros(&[4 * a, h, w]);
        for i in 0..h {
            for j in 0..w {
                for k in 0..a {
                    go.data_mut()[(k * h + i) * w + j] = g_logits[at];
                    for c in 0..4 {
                        gd.data_mut()[((4 * k + c) * h + i) * w + j] = g_deltas[at][c];
                    }
                    at += 1;
                }
            }
        }
        seeds.push((*ov, go));
        seeds.push((*dv, gd));
    }
    if at != g_logits.len() {
        return Err(Error::shape("rpn", format!("{} anchor gradients for {at} anchors", g_logits.len())));
    }
    Ok(seeds)
}

/// Anchors for the given levels, flattened in RPN output order.
pub fn flat_anchors(cfg: &ModelConfig, height: usize, width: usize) -> Result<Vec<BBox>> {
    let levels = cfg.feature_levels(height, width)?;
    Ok(generate_anchors(&levels, &cfg.anchors.ratios).into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub fc1: (Var, Var),
    pub fc2: (Var, Var),
    pub cls: (Var, Var),
    pub bbox: (Var, Var),
}

impl HeadVars {
    pub fn from_bound(bound: &BoundParams) -> Result<Self> {
        let pair = |p: &str| -> Result<(Var, Var)> {
            let (k, b) = conv_names(p);
            Ok((bound.var(&k)?, bound.var(&b)?))
        };
        Ok(HeadVars {
            fc1: pair("head.fc1")?,
            fc2: pair("head.fc2")?,
            cls: pair("head.cls")?,
            bbox: pair("head.box")?,
        })
    }
}

/// Routes each RoI to a feature level and its sampling scale.
pub fn roi_sources(cfg: &ModelConfig, feats: &Features, rois: &[BBox]) -> Vec<RoiSource> {
    rois.iter()
        .map(|r| {
            let level = if feats.levels.len() == 1 {
                0
            } else {
                cfg.head.level_mapper.level(r) - crate::fpn::FIRST_LEVEL
            };
            let level = level.min(feats.levels.len() - 1);
            RoiSource {
                roi: *r,
                level,
                cfg: cfg.head.roi_align.with_scale(1.0 / feats.strides[level] as f64),
            }
        })
        .collect()
}

/// Class logits `[R, K]` and class-agnostic deltas `[R, 4]`.
pub fn head_forward_tape(tape: &mut Tape, levels: &[Var], rois: &[RoiSource], w: &HeadVars) -> Result<(Var, Var)> {
    let pooled = tape.roi_align(levels, rois)?;
    let shape = tape.value(pooled)?.shape().to_vec();
    let flat = tape.reshape(pooled, &[shape[0], shape[1..].iter().product()])?;
    let h = tape.linear(flat, w.fc1.0, Some(w.fc1.1))?;
    let h = tape.act(h, Activation::Relu)?;
    let h = tape.linear(h, w.fc2.0, Some(w.fc2.1))?;
    let h = tape.act(h, Activation::Relu)?;
    let cls = tape.linear(h, w.cls.0, Some(w.cls.1))?;
    let bbox = tape.linear(h, w.bbox.0, Some(w.bbox.1))?;
    tape.set_label(cls, "head.class_logits");
    tape.set_label(bbox, "head.deltas");
    Ok((cls, bbox))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(toggles: super::super::config::Toggles) -> ModelConfig {
        let mut c = ModelConfig::toy();
        c.toggles = toggles;
        c.pyramid_channels = 8;
        c.backbone.base_width = 16;
        c.head.fc_dim = 16;
        c
    }

    #[test]
    fn parameter_layout_follows_toggles() {
        use super::super::config::Toggles;
        let all = Detector::new(tiny(Toggles::ALL), 1).unwrap();
        assert!(all.params.contains("fpn.lateral2"));
        assert!(all.params.contains("fpn.lateral5.bias"));
        assert!(all.params.contains("backbone.s1.b0.cbam.w0"));
        assert!(all.params.contains("backbone.s3.b1.conv2.offset.weight"));
        assert!(!all.params.contains("backbone.s2.b1.conv2.offset.weight"));
        let none = Detector::new(tiny(Toggles::NONE), 1).unwrap();
        assert!(!none.params.names().any(|n| n.contains("cbam") || n.contains("fpn") || n.contains("offset")));
        assert_eq!(none.params.get("rpn.cls.weight").unwrap().shape()[0], 12);
    }

    #[test]
    fn feature_shapes_and_anchor_count() {
        use super::super::config::Toggles;
        let d = Detector::new(tiny(Toggles::ALL), 2).unwrap();
        let mut tape = Tape::new();
        let bound = d.params.bind(&mut tape);
        let f = features_forward(&mut tape, &bound, &d.config, &Tensor::full(&[1, 64, 64], 0.3)).unwrap();
        let sizes: Vec<_> = f.levels.iter().map(|&v| tape.value(v).unwrap().shape().to_vec()).collect();
        assert_eq!(sizes, vec![vec![8, 16, 16], vec![8, 8, 8], vec![8, 4, 4], vec![8, 2, 2]]);
        assert_eq!(flat_anchors(&d.config, 64, 64).unwrap().len(), 1020);
        let rpn = rpn_forward_tape(&mut tape, &f.levels, &RpnVars::from_bound(&bound).unwrap()).unwrap();
        let (logits, deltas) = flatten_rpn(&tape, &rpn).unwrap();
        assert_eq!((logits.len(), deltas.len()), (1020, 1020));
        let seeds = unflatten_rpn(&tape, &rpn, &logits, &deltas).unwrap();
        assert_eq!(seeds[0].1, tape.value(rpn.objectness[0]).unwrap().clone());
    }

    #[test]
    fn checkpoint_shapes_are_checked() {
        use super::super::config::Toggles;
        let d = Detector::new(tiny(Toggles::ALL), 3).unwrap();
        Detector::from_params(d.config.clone(), d.params.clone()).unwrap();
        let mut other = d.config.clone();
        other.toggles.cbam = false;
        assert!(Detector::from_params(other, d.params.clone()).is_err());
    }
}
