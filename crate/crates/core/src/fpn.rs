//! Feature pyramid: 1x1 lateral projections merged top-down with bilinear
//! upsampling. There is no smoothing convolution after the merge.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::ConvWeights;
use crate::params::{BoundParams, ParamStore};
use crate::tensor::Tensor;

pub const PYRAMID_CHANNELS: usize = 256;
pub const LEVEL_STRIDES: [usize; 4] = [4, 8, 16, 32];
/// Index of the finest level (`P2`).
pub const FIRST_LEVEL: usize = 2;

/// Output maps `P2..P5`, finest first, with their strides.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidFeatures {
    levels: Vec<(Tensor, usize)>,
}

impl PyramidFeatures {
    /// Validates four levels with uniform channels and strides 4/8/16/32.
    pub fn new(maps: Vec<Tensor>) -> Result<Self> {
        if maps.len() != LEVEL_STRIDES.len() {
            return Err(Error::invalid(
                "levels",
                format!("expected {} pyramid levels, got {}", LEVEL_STRIDES.len(), maps.len()),
            ));
        }
        let c = maps[0].dims3()?.0;
        for (i, m) in maps.iter().enumerate() {
            if m.dims3()?.0 != c {
                return Err(Error::shape(
                    "pyramid",
                    format!("level P{} has {} channels, P2 has {c}", i + FIRST_LEVEL, m.shape()[0]),
                ));
            }
        }
        check_monotone(&maps)?;
        Ok(PyramidFeatures {
            levels: maps.into_iter().zip(LEVEL_STRIDES).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Map and stride of pyramid level `k` (2..=5).
    pub fn level(&self, k: usize) -> Option<(&Tensor, usize)> {
        k.checked_sub(FIRST_LEVEL)
            .and_then(|i| self.levels.get(i))
            .map(|(t, s)| (t, *s))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Tensor, usize)> {
        self.levels.iter().map(|(t, s)| (t, *s))
    }

    pub fn channels(&self) -> usize {
        self.levels[0].0.shape()[0]
    }
}

fn check_monotone(maps: &[Tensor]) -> Result<()> {
    for pair in maps.windows(2) {
        let (_, h0, w0) = pair[0].dims3()?;
        let (_, h1, w1) = pair[1].dims3()?;
        if h1 >= h0 || w1 >= w0 {
            return Err(Error::shape(
                "fpn_build",
                format!("level sizes must strictly decrease, got {h0}x{w0} then {h1}x{w1}"),
            ));
        }
    }
    Ok(())
}

/// Lateral 1x1 convolutions for `C2..C5`, finest first.
#[derive(Debug, Clone, PartialEq)]
pub struct FpnWeights {
    pub laterals: Vec<ConvWeights>,
}

impl FpnWeights {
    /// He-initialised laterals from the given backbone widths.
    pub fn random<R: Rng + ?Sized>(in_channels: [usize; 4], out_channels: usize, rng: &mut R) -> Self {
        FpnWeights {
            laterals: in_channels
                .iter()
                .map(|&c| ConvWeights::he_normal(out_channels, c, 1, 1, 1, 0, rng))
                .collect(),
        }
    }

    pub fn zeros(in_channels: [usize; 4], out_channels: usize) -> Self {
        FpnWeights {
            laterals: in_channels
                .iter()
                .map(|&c| ConvWeights::zeros(out_channels, c, 1, 1, 1, 0))
                .collect(),
        }
    }

    pub fn insert_into(&self, store: &mut ParamStore) {
        for (i, w) in self.laterals.iter().enumerate() {
            let name = lateral_name(i + FIRST_LEVEL);
            store.insert(format!("{name}.bias"), w.bias.clone());
            store.insert(name, w.kernel.clone());
        }
    }
}

pub fn lateral_name(level: usize) -> String {
    format!("fpn.lateral{level}")
}

/// Tape version of [`fpn_build`]. `c` and `laterals` are `(kernel, bias)`
/// pairs ordered finest first; returns `P2..P5`.
pub fn fpn_forward(tape: &mut Tape, c: &[Var], laterals: &[(Var, Var)]) -> Result<Vec<Var>> {
    if c.len() != LEVEL_STRIDES.len() || laterals.len() != c.len() {
        return Err(Error::invalid(
            "levels",
            format!("need C2..C5 and four laterals, got {} and {}", c.len(), laterals.len()),
        ));
    }
    let maps: Vec<Tensor> = c.iter().map(|&v| tape.value(v).cloned()).collect::<Result<_>>()?;
    check_monotone(&maps)?;
    let mut out: Vec<Var> = Vec::with_capacity(c.len());
    let mut above: Option<Var> = None;
    for i in (0..c.len()).rev() {
        let (k, b) = laterals[i];
        let lat = tape.conv2d(c[i], k, b, 1, 0)?;
        let p = match above {
            None => lat,
            Some(prev) => {
                let (_, h, w) = tape.value(lat)?.dims3()?;
                let up = tape.upsample(prev, h, w)?;
                tape.add(lat, up)?
            }
        };
        tape.set_label(p, format!("fpn.p{}", i + FIRST_LEVEL));
        out.push(p);
        above = Some(p);
    }
    out.reverse();
    Ok(out)
}

/// Looks up the lateral handles bound from a [`ParamStore`].
pub fn bound_laterals(bound: &BoundParams) -> Result<Vec<(Var, Var)>> {
    (FIRST_LEVEL..FIRST_LEVEL + LEVEL_STRIDES.len())
        .map(|l| {
            let n = lateral_name(l);
            Ok((bound.var(&n)?, bound.var(&format!("{n}.bias"))?))
        })
        .collect()
}

/// Builds `P2..P5` from backbone maps `C2..C5` (finest first).
pub fn fpn_build(backbone: &[Tensor], weights: &FpnWeights) -> Result<PyramidFeatures> {
    let mut tape = Tape::new();
    let c: Vec<Var> = backbone.iter().map(|t| tape.leaf(t.clone())).collect();
    let lat: Vec<(Var, Var)> = weights
        .laterals
        .iter()
        .map(|w| (tape.leaf(w.kernel.clone()), tape.leaf(w.bias.clone())))
        .collect();
    let p = fpn_forward(&mut tape, &c, &lat)?;
    PyramidFeatures::new(p.iter().map(|&v| tape.value(v).cloned()).collect::<Result<_>>()?)
}
