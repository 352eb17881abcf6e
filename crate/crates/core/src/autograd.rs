//! Reverse-mode differentiation over an append-only tape.
//!
//! Every operation records its output value and the handles of its inputs.
//! [`Tape::backward`] walks the tape in reverse, calling the hand-written
//! backward kernel of each op, and returns gradients for every node that the
//! seeds reach. Handles from another tape (or from before a `truncate`) are
//! rejected instead of silently producing garbage.

use crate::deform::{deform_conv2d, deform_conv2d_backward, OffsetField};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::ops::{
    channel_pool, channel_pool_backward, conv2d, conv2d_backward, global_pool, global_pool_backward, linear,
    linear_backward, Activation, ConvWeights, PoolMode,
};
use crate::roi_align::{roi_align, roi_align_accumulate, RoiAlignConfig};
use crate::tensor::Tensor;
use crate::upsample::{bilinear_upsample, bilinear_upsample_backward};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One RoI to pool: the box in image coordinates and the index of the
/// source map within the op's `levels`.
#[derive(Debug, Clone, Copy)]
pub struct RoiSource {
    pub roi: BBox,
    pub level: usize,
    pub cfg: RoiAlignConfig,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { x: Var, k: Var, b: Var, stride: usize, pad: usize },
    DeformConv2d { x: Var, k: Var, b: Var, off: Var, stride: usize, pad: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Act(Var, Activation),
    ScaleChannels { x: Var, s: Var },
    ScaleSpatial { x: Var, s: Var },
    GlobalPool(Var, PoolMode),
    ChannelPool(Var, PoolMode),
    Concat(Vec<Var>),
    Reshape(Var),
    Upsample(Var),
    RoiAlign { levels: Vec<Var>, rois: Vec<RoiSource> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::DeformConv2d { .. } => "deform_conv2d",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Act(..) => "activation",
            Op::ScaleChannels { .. } => "scale_channels",
            Op::ScaleSpatial { .. } => "scale_spatial",
            Op::GlobalPool(..) => "global_pool",
            Op::ChannelPool(..) => "channel_pool",
            Op::Concat(..) => "concat",
            Op::Reshape(..) => "reshape",
            Op::Upsample(..) => "upsample",
            Op::RoiAlign { .. } => "roi_align",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    label: Option<String>,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op, label: None });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::NoForward(format!("node #{}", v.0)))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.node(v)?.value)
    }

    /// Attaches a human-readable name used in diagnostics.
    pub fn set_label(&mut self, v: Var, label: impl Into<String>) {
        if let Some(n) = self.nodes.get_mut(v.0) {
            n.label = Some(label.into());
        }
    }

    /// Label of `v`, falling back to `<op>#<index>`.
    pub fn describe(&self, v: Var) -> String {
        match self.nodes.get(v.0) {
            Some(Node { label: Some(l), .. }) => l.clone(),
            Some(n) => format!("{}#{}", n.op.name(), v.0),
            None => format!("#{}", v.0),
        }
    }

    /// First node whose value contains NaN or infinity.
    pub fn first_non_finite(&self) -> Option<Var> {
        self.nodes.iter().position(|n| !n.value.is_finite()).map(Var)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn conv_weights(&self, k: Var, b: Var, stride: usize, pad: usize) -> Result<ConvWeights> {
        ConvWeights::new(self.value(k)?.clone(), self.value(b)?.clone(), stride, pad)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.conv_weights(k, b, stride, pad)?;
        let y = conv2d(self.value(x)?, &w)?;
        Ok(self.push(y, Op::Conv2d { x, k, b, stride, pad }))
    }

    /// Deformable convolution; `off` holds `[2 kH kW, H', W']` offsets.
    pub fn deform_conv2d(&mut self, x: Var, k: Var, b: Var, off: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.conv_weights(k, b, stride, pad)?;
        let (kh, kw) = w.kernel_size();
        let field = OffsetField::new(self.value(off)?.clone(), kh, kw)?;
        let y = deform_conv2d(self.value(x)?, &w, &field)?;
        Ok(self.push(y, Op::DeformConv2d { x, k, b, off, stride, pad }))
    }

    /// `x [N, in] . w[out, in]^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let bias = match b {
            Some(b) => Some(self.value(b)?),
            None => None,
        };
        let y = linear(self.value(x)?, self.value(w)?, bias)?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a)?.add(self.value(b)?)?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn act(&mut self, x: Var, act: Activation) -> Result<Var> {
        let y = self.value(x)?.map(|t| act.apply(t));
        Ok(self.push(y, Op::Act(x, act)))
    }

    /// `x [C, H, W] * s [C, 1, 1]`, broadcast over space.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (c, h, w) = self.value(x)?.dims3()?;
        let sv = self.value(s)?;
        if sv.shape() != [c, 1, 1] {
            return Err(Error::shape(
                "scale_channels",
                format!("scale {:?} for a {c}-channel map", sv.shape()),
            ));
        }
        let xv = self.value(x)?;
        let y = Tensor::from_fn(&[c, h, w], |i| xv.data()[i] * sv.data()[i / (h * w)]);
        Ok(self.push(y, Op::ScaleChannels { x, s }))
    }

    /// `x [C, H, W] * s [1, H, W]`, broadcast over channels.
    pub fn scale_spatial(&mut self, x: Var, s: Var) -> Result<Var> {
        let (c, h, w) = self.value(x)?.dims3()?;
        let sv = self.value(s)?;
        if sv.shape() != [1, h, w] {
            return Err(Error::shape(
                "scale_spatial",
                format!("scale {:?} for a {h}x{w} map", sv.shape()),
            ));
        }
        let xv = self.value(x)?;
        let y = Tensor::from_fn(&[c, h, w], |i| xv.data()[i] * sv.data()[i % (h * w)]);
        Ok(self.push(y, Op::ScaleSpatial { x, s }))
    }

    pub fn global_pool(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let y = global_pool(self.value(x)?, mode)?;
        Ok(self.push(y, Op::GlobalPool(x, mode)))
    }

    pub fn channel_pool(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let y = channel_pool(self.value(x)?, mode)?;
        Ok(self.push(y, Op::ChannelPool(x, mode)))
    }

    /// Concatenates along the leading axis; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("parts", "concat needs at least one input"))?;
        let tail = self.value(*first)?.shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p)?;
            if v.shape()[1..] != tail[..] {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} does not stack with trailing extents {tail:?}", v.shape()),
                ));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let y = Tensor::new(&shape, data)?;
        Ok(self.push(y, Op::Concat(parts.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x)?.clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x)))
    }

    pub fn upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = bilinear_upsample(self.value(x)?, out_h, out_w)?;
        Ok(self.push(y, Op::Upsample(x)))
    }

    /// Pools every RoI from its assigned map into `[R, C, out_h, out_w]`.
    /// All maps need the same channel count and all configs the same grid.
    pub fn roi_align(&mut self, levels: &[Var], rois: &[RoiSource]) -> Result<Var> {
        let first = rois
            .first()
            .ok_or_else(|| Error::invalid("rois", "roi_align needs at least one RoI"))?;
        let (oh, ow) = (first.cfg.out_h, first.cfg.out_w);
        let mut channels = None;
        let mut data = Vec::new();
        for r in rois {
            let map = levels.get(r.level).ok_or_else(|| {
                Error::invalid("rois", format!("level index {} out of {}", r.level, levels.len()))
            })?;
            if (r.cfg.out_h, r.cfg.out_w) != (oh, ow) {
                return Err(Error::shape("roi_align", "RoIs disagree on the output grid"));
            }
            let y = roi_align(self.value(*map)?, &r.roi, &r.cfg)?;
            let c = y.shape()[0];
            if *channels.get_or_insert(c) != c {
                return Err(Error::shape("roi_align", "pyramid levels differ in channel count"));
            }
            data.extend_from_slice(y.data());
        }
        let c = channels.unwrap_or(1);
        let y = Tensor::new(&[rois.len(), c, oh, ow], data)?;
        Ok(self.push(
            y,
            Op::RoiAlign {
                levels: levels.to_vec(),
                rois: rois.to_vec(),
            },
        ))
    }

    /// Propagates the seed gradients back through the tape.
    ///
    /// Each seed pairs a node with `d loss / d node`. Seeds must reference
    /// nodes recorded on this tape and match their shapes.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            let node = self.node(*v)?;
            if node.value.shape() != g.shape() {
                return Err(Error::shape(
                    "backward",
                    format!(
                        "seed for {} has shape {:?}, value is {:?}",
                        self.describe(*v),
                        g.shape(),
                        node.value.shape()
                    ),
                ));
            }
            accumulate(&mut grads[v.0], g.clone())?;
            last = last.max(v.0 + 1);
        }
        for i in (0..last).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, b, stride, pad } => {
                let w = self.conv_weights(*k, *b, *stride, *pad)?;
                let r = conv2d_backward(self.value(*x)?, &w, g)?;
                accumulate(&mut grads[x.0], r.input)?;
                accumulate(&mut grads[k.0], r.kernel)?;
                accumulate(&mut grads[b.0], r.bias)?;
            }
            Op::DeformConv2d { x, k, b, off, stride, pad } => {
                let w = self.conv_weights(*k, *b, *stride, *pad)?;
                let (kh, kw) = w.kernel_size();
                let field = OffsetField::new(self.value(*off)?.clone(), kh, kw)?;
                let r = deform_conv2d_backward(self.value(*x)?, &w, &field, g)?;
                accumulate(&mut grads[x.0], r.input)?;
                accumulate(&mut grads[k.0], r.kernel)?;
                accumulate(&mut grads[b.0], r.bias)?;
                accumulate(&mut grads[off.0], r.offsets)?;
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = linear_backward(self.value(*x)?, self.value(*w)?, g)?;
                accumulate(&mut grads[x.0], dx)?;
                accumulate(&mut grads[w.0], dw)?;
                if let Some(b) = b {
                    let shape = self.value(*b)?.shape().to_vec();
                    accumulate(&mut grads[b.0], db.reshape(&shape)?)?;
                }
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g.clone())?;
                accumulate(&mut grads[b.0], g.clone())?;
            }
            Op::Act(x, act) => {
                let xv = self.value(*x)?;
                let d = Tensor::from_fn(xv.shape(), |j| {
                    g.data()[j] * act.derivative(xv.data()[j], node.value.data()[j])
                });
                accumulate(&mut grads[x.0], d)?;
            }
            Op::ScaleChannels { x, s } => {
                let (xv, sv) = (self.value(*x)?, self.value(*s)?);
                let (c, h, w) = xv.dims3()?;
                let hw = h * w;
                let dx = Tensor::from_fn(xv.shape(), |j| g.data()[j] * sv.data()[j / hw]);
                let ds = Tensor::from_fn(&[c, 1, 1], |ci| {
                    let r = ci * hw..(ci + 1) * hw;
                    g.data()[r.clone()].iter().zip(&xv.data()[r]).map(|(a, b)| a * b).sum()
                });
                accumulate(&mut grads[x.0], dx)?;
                accumulate(&mut grads[s.0], ds)?;
            }
            Op::ScaleSpatial { x, s } => {
                let (xv, sv) = (self.value(*x)?, self.value(*s)?);
                let (c, h, w) = xv.dims3()?;
                let hw = h * w;
                let dx = Tensor::from_fn(xv.shape(), |j| g.data()[j] * sv.data()[j % hw]);
                let ds = Tensor::from_fn(&[1, h, w], |p| (0..c).map(|ci| g.data()[ci * hw + p] * xv.data()[ci * hw + p]).sum());
                accumulate(&mut grads[x.0], dx)?;
                accumulate(&mut grads[s.0], ds)?;
            }
            Op::GlobalPool(x, mode) => {
                let d = global_pool_backward(self.value(*x)?, *mode, g)?;
                accumulate(&mut grads[x.0], d)?;
            }
            Op::ChannelPool(x, mode) => {
                let d = channel_pool_backward(self.value(*x)?, *mode, g)?;
                accumulate(&mut grads[x.0], d)?;
            }
            Op::Concat(parts) => {
                let mut at = 0;
                for p in parts {
                    let shape = self.value(*p)?.shape().to_vec();
                    let n: usize = shape.iter().product();
                    let d = Tensor::new(&shape, g.data()[at..at + n].to_vec())?;
                    accumulate(&mut grads[p.0], d)?;
                    at += n;
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x)?.shape().to_vec();
                accumulate(&mut grads[x.0], g.clone().reshape(&shape)?)?;
            }
            Op::Upsample(x) => {
                let d = bilinear_upsample_backward(self.value(*x)?.shape(), g)?;
                accumulate(&mut grads[x.0], d)?;
            }
            Op::RoiAlign { levels, rois } => {
                let mut bufs: Vec<Option<Vec<f64>>> = vec![None; levels.len()];
                let per_roi = g.len() / rois.len();
                for (r, src) in rois.iter().enumerate() {
                    let map = self.value(levels[src.level])?;
                    let buf = bufs[src.level].get_or_insert_with(|| vec![0.0; map.len()]);
                    roi_align_accumulate(map, &src.roi, &src.cfg, &g.data()[r * per_roi..(r + 1) * per_roi], buf)?;
                }
                for (lv, buf) in levels.iter().zip(bufs) {
                    if let Some(buf) = buf {
                        let shape = self.value(*lv)?.shape().to_vec();
                        accumulate(&mut grads[lv.0], Tensor::new(&shape, buf)?)?;
                    }
                }
            }
        }
        Ok(())
    }
}
