//! Convolutional block attention: a channel gate followed by a spatial gate.
//!
//! The channel gate squeezes the map with global average and max pooling,
//! runs both descriptors through one shared two-layer MLP (leaky-ReLU
//! hidden layer) and adds the results before a sigmoid. The spatial gate
//! stacks the per-pixel channel mean and max and convolves them with a
//! 7x7 kernel. The gates are applied in that order.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{Activation, ConvWeights, PoolMode, DEFAULT_LEAKY_SLOPE};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_REDUCTION: usize = 16;
pub const SPATIAL_KERNEL: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct CbamWeights {
    /// `[C/r, C]`
    pub w0: Tensor,
    /// `[C, C/r]`
    pub w1: Tensor,
    pub b0: Option<Tensor>,
    pub b1: Option<Tensor>,
    /// 2 -> 1 channels, 7x7, padding 3.
    pub spatial: ConvWeights,
    pub slope: f64,
}

/// Hidden width `C / r`, rejecting ratios that do not divide `C`.
pub fn hidden_width(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || channels == 0 || channels % reduction != 0 {
        return Err(Error::invalid(
            "reduction",
            format!("ratio {reduction} must be positive and divide the {channels} channels"),
        ));
    }
    Ok(channels / reduction)
}

impl CbamWeights {
    /// All-zero weights: both gates output 0.5 everywhere.
    pub fn zeros(channels: usize, reduction: usize, with_bias: bool) -> Result<Self> {
        let hidden = hidden_width(channels, reduction)?;
        Ok(CbamWeights {
            w0: Tensor::zeros(&[hidden, channels]),
            w1: Tensor::zeros(&[channels, hidden]),
            b0: with_bias.then(|| Tensor::zeros(&[hidden])),
            b1: with_bias.then(|| Tensor::zeros(&[channels])),
            spatial: ConvWeights::zeros(1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL, 1, SPATIAL_KERNEL / 2),
            slope: DEFAULT_LEAKY_SLOPE,
        })
    }

    /// He-scaled random MLP and spatial kernel, zero biases.
    pub fn random<R: Rng + ?Sized>(channels: usize, reduction: usize, with_bias: bool, rng: &mut R) -> Result<Self> {
        let mut w = Self::zeros(channels, reduction, with_bias)?;
        let hidden = w.hidden();
        w.w0 = Tensor::randn(&[hidden, channels], (2.0 / channels as f64).sqrt(), rng);
        w.w1 = Tensor::randn(&[channels, hidden], (2.0 / hidden as f64).sqrt(), rng);
        let k = SPATIAL_KERNEL;
        let n = Normal::new(0.0, (2.0 / (2 * k * k) as f64).sqrt()).expect("finite std");
        w.spatial.kernel = Tensor::from_fn(&[1, 2, k, k], |_| n.sample(rng));
        Ok(w)
    }

    pub fn channels(&self) -> usize {
        self.w0.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w0.shape()[0]
    }

    /// Writes the weights under `<prefix>.cbam.*`.
    pub fn insert_into(&self, store: &mut ParamStore, prefix: &str) {
        let base = format!("{prefix}.cbam");
        store.insert(format!("{base}.w0"), self.w0.clone());
        store.insert(format!("{base}.w1"), self.w1.clone());
        if let Some(b) = &self.b0 {
            store.insert(format!("{base}.w0_bias"), b.clone());
        }
        if let Some(b) = &self.b1 {
            store.insert(format!("{base}.w1_bias"), b.clone());
        }
        store.insert(format!("{base}.spatial"), self.spatial.kernel.clone());
        store.insert(format!("{base}.spatial_bias"), self.spatial.bias.clone());
    }

    fn bind(&self, tape: &mut Tape) -> CbamVars {
        CbamVars {
            w0: tape.leaf(self.w0.clone()),
            w1: tape.leaf(self.w1.clone()),
            b0: self.b0.as_ref().map(|b| tape.leaf(b.clone())),
            b1: self.b1.as_ref().map(|b| tape.leaf(b.clone())),
            spatial: tape.leaf(self.spatial.kernel.clone()),
            spatial_bias: tape.leaf(self.spatial.bias.clone()),
            slope: self.slope,
        }
    }
}

/// Tape handles of one CBAM block.
#[derive(Debug, Clone, Copy)]
pub struct CbamVars {
    pub w0: Var,
    pub w1: Var,
    pub b0: Option<Var>,
    pub b1: Option<Var>,
    pub spatial: Var,
    pub spatial_bias: Var,
    pub slope: f64,
}

impl CbamVars {
    pub fn from_bound(bound: &BoundParams, prefix: &str, slope: f64) -> Result<Self> {
        let base = format!("{prefix}.cbam");
        Ok(CbamVars {
            w0: bound.var(&format!("{base}.w0"))?,
            w1: bound.var(&format!("{base}.w1"))?,
            b0: bound.opt(&format!("{base}.w0_bias")),
            b1: bound.opt(&format!("{base}.w1_bias")),
            spatial: bound.var(&format!("{base}.spatial"))?,
            spatial_bias: bound.var(&format!("{base}.spatial_bias"))?,
            slope,
        })
    }
}

fn shared_mlp(tape: &mut Tape, pooled: Var, v: &CbamVars) -> Result<Var> {
    let c = tape.value(pooled)?.len();
    let row = tape.reshape(pooled, &[1, c])?;
    let h = tape.linear(row, v.w0, v.b0)?;
    let h = tape.act(h, Activation::LeakyRelu(v.slope))?;
    tape.linear(h, v.w1, v.b1)
}

/// Channel gate `[C, 1, 1]` on the tape.
pub fn channel_gate(tape: &mut Tape, x: Var, v: &CbamVars) -> Result<Var> {
    let c = tape.value(x)?.dims3()?.0;
    let c_w = tape.value(v.w0)?.shape()[1];
    if c != c_w {
        return Err(Error::shape(
            "channel_attention",
            format!("input has {c} channels, MLP expects {c_w}"),
        ));
    }
    let avg = tape.global_pool(x, PoolMode::Avg)?;
    let max = tape.global_pool(x, PoolMode::Max)?;
    let a = shared_mlp(tape, avg, v)?;
    let m = shared_mlp(tape, max, v)?;
    let s = tape.add(a, m)?;
    let s = tape.act(s, Activation::Sigmoid)?;
    tape.reshape(s, &[c, 1, 1])
}

/// Spatial gate `[1, H, W]` on the tape.
pub fn spatial_gate(tape: &mut Tape, x: Var, v: &CbamVars) -> Result<Var> {
    let mean = tape.channel_pool(x, PoolMode::Avg)?;
    let max = tape.channel_pool(x, PoolMode::Max)?;
    let stacked = tape.concat(&[mean, max])?;
    let pad = SPATIAL_KERNEL / 2;
    let s = tape.conv2d(stacked, v.spatial, v.spatial_bias, 1, pad)?;
    tape.act(s, Activation::Sigmoid)
}

/// Full block on the tape: channel gate, then spatial gate on the result.
pub fn cbam_forward(tape: &mut Tape, x: Var, v: &CbamVars) -> Result<Var> {
    let mc = channel_gate(tape, x, v)?;
    let refined = tape.scale_channels(x, mc)?;
    let ms = spatial_gate(tape, refined, v)?;
    tape.scale_spatial(refined, ms)
}

fn run(f: &Tensor, w: &CbamWeights, op: fn(&mut Tape, Var, &CbamVars) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(f.clone());
    let vars = w.bind(&mut tape);
    let y = op(&mut tape, x, &vars)?;
    Ok(tape.value(y)?.clone())
}

/// Channel attention weights `[C, 1, 1]`, each in (0, 1).
pub fn channel_attention(f: &Tensor, w: &CbamWeights) -> Result<Tensor> {
    run(f, w, channel_gate)
}

/// Spatial attention map `[1, H, W]`, each value in (0, 1).
pub fn spatial_attention(f: &Tensor, w: &CbamWeights) -> Result<Tensor> {
    run(f, w, spatial_gate)
}

/// Refined map with the same shape as `f`.
pub fn cbam_apply(f: &Tensor, w: &CbamWeights) -> Result<Tensor> {
    run(f, w, cbam_forward)
}
