//! Finite-difference verification of every backward pass.
//!
//! Each registered check builds a small random problem: named input tensors
//! and a scalar function of them. For tape ops the scalar is a random
//! projection `Σ w·out` of the op's output, so the analytic gradient is the
//! tape's backward seeded with `w`. Every input coordinate (or a random
//! subset of large tensors) is compared against a central difference with
//! step [`STEP`].
//!
//! Piecewise-smooth ops (ReLU, max pooling) are only differentiable away
//! from their kinks. For checks flagged as such, a coordinate whose
//! difference quotients at `h` and `h/2` disagree is treated as sitting on
//! a kink and the whole problem is redrawn from the next sub-seed.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{RoiSource, Tape, Var};
use crate::cbam::{cbam_forward, channel_gate, spatial_gate, CbamVars, CbamWeights};
use crate::detector::config::ModelConfig;
use crate::detector::model::{head_forward_tape, rpn_forward_tape, HeadVars, RpnVars};
use crate::detector::train::mix_seed;
use crate::error::{Error, Result};
use crate::fpn::{bound_laterals, fpn_forward, FpnWeights};
use crate::geometry::BBox;
use crate::loss::{box_regression_grad, box_regression_loss, focal_loss, focal_loss_logit, FocalParams};
use crate::ops::{sigmoid, Activation, ConvWeights, PoolMode};
use crate::params::{BoundParams, ParamStore};
use crate::roi_align::RoiAlignConfig;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: usize = 20;
/// Gradients smaller than this are compared in absolute terms:
/// `|a - n| / max(|a|, |n|, FLOOR)`.
pub const FLOOR: f64 = 1e-2;
/// Coordinates checked per input tensor; larger tensors are subsampled.
pub const MAX_COORDS: usize = 160;
const MAX_REDRAWS: u64 = 50;

type ValueFn = Box<dyn Fn(&ParamStore) -> Result<f64>>;
type GradFn = Box<dyn Fn(&ParamStore) -> Result<ParamStore>>;

/// One randomly drawn instance of a check.
pub struct Problem {
    pub shape: Vec<usize>,
    pub inputs: ParamStore,
    value: ValueFn,
    grad: GradFn,
}

impl Problem {
    /// Scalar problem from a forward builder on the tape. The projection
    /// weights are drawn once from `rng`.
    pub fn on_tape<F>(shape: Vec<usize>, inputs: ParamStore, rng: &mut ChaCha8Rng, forward: F) -> Result<Self>
    where
        F: Fn(&mut Tape, &BoundParams) -> Result<Var> + Clone + 'static,
    {
        let mut tape = Tape::new();
        let bound = inputs.bind(&mut tape);
        let out = forward(&mut tape, &bound)?;
        let proj = Tensor::randn(tape.value(out)?.shape(), 1.0, rng);
        let (f1, p1) = (forward.clone(), proj.clone());
        let value: ValueFn = Box::new(move |p| {
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape);
            let out = f1(&mut tape, &bound)?;
            Ok(tape.value(out)?.dot(&p1))
        });
        let grad: GradFn = Box::new(move |p| {
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape);
            let out = forward(&mut tape, &bound)?;
            let mut g = tape.backward(&[(out, proj.clone())])?;
            bound.gradients(p, &mut g)
        });
        Ok(Problem {
            shape,
            inputs,
            value,
            grad,
        })
    }

    /// Scalar problem with hand-written value and gradient.
    pub fn scalar(
        shape: Vec<usize>,
        inputs: ParamStore,
        value: impl Fn(&ParamStore) -> Result<f64> + 'static,
        grad: impl Fn(&ParamStore) -> Result<ParamStore> + 'static,
    ) -> Self {
        Problem {
            shape,
            inputs,
            value: Box::new(value),
            grad: Box::new(grad),
        }
    }
}

/// A registered check.
#[derive(Clone, Copy)]
pub struct GradCheck {
    /// Owning module, used as the scope filter.
    pub module: &'static str,
    pub op: &'static str,
    /// The op has kinks; see the module docs.
    pub piecewise: bool,
    pub build: fn(&mut ChaCha8Rng) -> Result<Problem>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub module: String,
    pub op: String,
    /// Shape of the primary input of the worst seed.
    pub shape: Vec<usize>,
    pub seeds: usize,
    /// Problems redrawn because a coordinate sat on a kink.
    pub redraws: usize,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    /// Input and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub passed: bool,
}

impl CheckReport {
    pub fn line(&self) -> String {
        let worst = self.worst.as_ref().map_or(String::new(), |(n, i)| format!(" at {n}[{i}]"));
        format!(
            "{} {}/{} shape {:?}: max rel err {:.3e}{} over {} seeds, {} coords",
            if self.passed { "PASS" } else { "FAIL" },
            self.module,
            self.op,
            self.shape,
            self.max_rel_error,
            worst,
            self.seeds,
            self.coords_checked
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn central(value: &ValueFn, p: &mut ParamStore, name: &str, i: usize, h: f64) -> Result<f64> {
    let x0 = p.get(name)?.data()[i];
    p.get_mut(name)?.data_mut()[i] = x0 + h;
    let up = value(p)?;
    p.get_mut(name)?.data_mut()[i] = x0 - h;
    let down = value(p)?;
    p.get_mut(name)?.data_mut()[i] = x0;
    Ok((up - down) / (2.0 * h))
}

struct SeedOutcome {
    max_rel: f64,
    worst: Option<(String, usize)>,
    coords: usize,
    shape: Vec<usize>,
}

/// `None` when a kink was hit and the problem must be redrawn.
fn check_problem(prob: Problem, piecewise: bool, corrupt: bool, rng: &mut ChaCha8Rng) -> Result<Option<SeedOutcome>> {
    let mut analytic = (prob.grad)(&prob.inputs)?;
    if corrupt {
        // stands in for a broken backward: one wrong entry in the first input
        if let Some((_, g)) = analytic.iter_mut().next() {
            let v = &mut g.data_mut()[0];
            *v += 0.1 * v.abs().max(1.0);
        }
    }
    let mut p = prob.inputs.clone();
    let names: Vec<String> = p.names().map(str::to_string).collect();
    let mut out = SeedOutcome {
        max_rel: 0.0,
        worst: None,
        coords: 0,
        shape: prob.shape,
    };
    for name in names {
        let n = p.get(&name)?.len();
        let coords: Vec<usize> = if n <= MAX_COORDS {
            (0..n).collect()
        } else {
            let mut v = sample(rng, n, MAX_COORDS).into_vec();
            v.sort_unstable();
            v
        };
        // corrupted entry must be among the checked ones
        let coords = if corrupt && out.coords == 0 && !coords.contains(&0) {
            std::iter::once(0).chain(coords).collect()
        } else {
            coords
        };
        for i in coords {
            let num = central(&prob.value, &mut p, &name, i, STEP)?;
            if piecewise {
                let half = central(&prob.value, &mut p, &name, i, STEP / 2.0)?;
                if (num - half).abs() > 1e-6 * num.abs().max(1.0) {
                    return Ok(None);
                }
            }
            let a = analytic.get(&name)?.data()[i];
            let rel = relative_error(a, num);
            if !rel.is_finite() {
                return Err(Error::NonFinite(format!("gradient check of `{name}`[{i}]")));
            }
            if out.worst.is_none() || rel > out.max_rel {
                out.max_rel = rel;
                out.worst = Some((name.clone(), i));
            }
            out.coords += 1;
        }
    }
    Ok(Some(out))
}

fn name_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Runs `check` over seeds `0..seeds`. With `corrupt` set, the analytic
/// gradient is deliberately damaged (used to test the failure path).
pub fn run_check(check: &GradCheck, seeds: usize, corrupt: bool) -> Result<CheckReport> {
    let mut report = CheckReport {
        module: check.module.to_string(),
        op: check.op.to_string(),
        shape: Vec::new(),
        seeds,
        redraws: 0,
        coords_checked: 0,
        max_rel_error: 0.0,
        worst: None,
        passed: true,
    };
    let tag = name_hash(check.op);
    for seed in 0..seeds as u64 {
        let mut done = false;
        for attempt in 0..MAX_REDRAWS {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[tag, seed, attempt]));
            let prob = (check.build)(&mut rng)?;
            match check_problem(prob, check.piecewise, corrupt, &mut rng)? {
                None => report.redraws += 1,
                Some(o) => {
                    report.coords_checked += o.coords;
                    if o.max_rel >= report.max_rel_error {
                        report.max_rel_error = o.max_rel;
                        report.worst = o.worst;
                        report.shape = o.shape;
                    }
                    done = true;
                    break;
                }
            }
        }
        if !done {
            return Err(Error::Validation(format!(
                "{}: no kink-free draw for seed {seed} in {MAX_REDRAWS} attempts",
                check.op
            )));
        }
    }
    report.passed = report.max_rel_error <= TOLERANCE;
    Ok(report)
}

/// Runs every check whose module or op matches `scope` (`None` or `"all"`
/// runs everything). `corrupt` names an op whose backward is damaged.
pub fn run_checks(scope: Option<&str>, seeds: usize, corrupt: Option<&str>) -> Result<Vec<CheckReport>> {
    let selected = select(scope)?;
    selected
        .iter()
        .map(|c| run_check(c, seeds, corrupt == Some(c.op)))
        .collect()
}

pub fn select(scope: Option<&str>) -> Result<Vec<GradCheck>> {
    let all = registry();
    let scope = scope.filter(|s| *s != "all");
    let picked: Vec<GradCheck> = all
        .iter()
        .filter(|c| scope.is_none_or(|s| c.module == s || c.op == s))
        .copied()
        .collect();
    if picked.is_empty() {
        let mut modules: Vec<&str> = all.iter().map(|c| c.module).collect();
        modules.dedup();
        return Err(Error::invalid(
            "scope",
            format!("`{}` matches no check; modules are {}", scope.unwrap_or(""), modules.join(", ")),
        ));
    }
    Ok(picked)
}

pub fn registry() -> Vec<GradCheck> {
    let c = |module, op, piecewise, build| GradCheck {
        module,
        op,
        piecewise,
        build,
    };
    vec![
        c("tensor-core", "conv2d", false, build_conv2d),
        c("tensor-core", "linear", false, build_linear),
        c("tensor-core", "upsample", false, build_upsample),
        c("tensor-core", "activations", true, build_activations),
        c("tensor-core", "pooling", true, build_pooling),
        c("deform-conv", "deform_conv2d", false, build_deform),
        c("attention-cbam", "channel_gate", true, build_channel_gate),
        c("attention-cbam", "spatial_gate", true, build_spatial_gate),
        c("attention-cbam", "cbam", true, build_cbam),
        c("fpn", "fpn", false, build_fpn),
        c("roi-align", "roi_align", false, build_roi_align),
        c("roi-align", "roi_align_max", true, build_roi_align_max),
        c("loss-objectives", "focal_loss", false, build_focal),
        c("loss-objectives", "box_regression", false, build_box_regression),
        c("detector", "rpn", true, build_rpn),
        c("detector", "roi_head", true, build_head),
    ]
}

// ---- problem builders ----

fn store(items: Vec<(&str, Tensor)>) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, t) in items {
        s.insert(n, t);
    }
    s
}

fn build_conv2d(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let (c, o) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let k = [1, 3][rng.random_range(0..2)];
    let (stride, pad) = (rng.random_range(1..=2), rng.random_range(0..=k / 2));
    let (h, w) = (rng.random_range(k.max(3)..=7), rng.random_range(k.max(3)..=7));
    let x = Tensor::randn(&[c, h, w], 1.0, rng);
    let inputs = store(vec![
        ("x", x),
        ("k", Tensor::randn(&[o, c, k, k], 0.5, rng)),
        ("b", Tensor::randn(&[o], 0.5, rng)),
    ]);
    Problem::on_tape(vec![c, h, w], inputs, rng, move |t, b| {
        t.conv2d(b.var("x")?, b.var("k")?, b.var("b")?, stride, pad)
    })
}

fn build_linear(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let (n, i, o) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=5));
    let inputs = store(vec![
        ("x", Tensor::randn(&[n, i], 1.0, rng)),
        ("w", Tensor::randn(&[o, i], 1.0, rng)),
        ("b", Tensor::randn(&[o], 1.0, rng)),
    ]);
    Problem::on_tape(vec![n, i], inputs, rng, |t, b| {
        t.linear(b.var("x")?, b.var("w")?, Some(b.var("b")?))
    })
}

fn build_upsample(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let (c, h, w) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4));
    let (oh, ow) = (h * rng.random_range(1..=3) + rng.random_range(0..=1), w * 2);
    let inputs = store(vec![("x", Tensor::randn(&[c, h, w], 1.0, rng))]);
    Problem::on_tape(vec![c, h, w], inputs, rng, move |t, b| t.upsample(b.var("x")?, oh, ow))
}

fn build_activations(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let n = rng.random_range(2..=12);
    let slope = rng.random_range(0.0..0.3);
    let inputs = store(vec![("x", Tensor::randn(&[n], 2.0, rng))]);
    Problem::on_tape(vec![n], inputs, rng, move |t, b| {
        let x = b.var("x")?;
        let s = t.act(x, Activation::Sigmoid)?;
        let r = t.act(x, Activation::Relu)?;
        let l = t.act(x, Activation::LeakyRelu(slope))?;
        let sr = t.add(s, r)?;
        t.add(sr, l)
    })
}

fn build_pooling(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let (c, h, w) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
    let inputs = store(vec![("x", Tensor::randn(&[c, h, w], 1.0, rng))]);
    Problem::on_tape(vec![c, h, w], inputs, rng, move |t, b| {
        let x = b.var("x")?;
        let parts = [
            t.global_pool(x, PoolMode::Avg)?,
            t.global_pool(x, PoolMode::Max)?,
        ];
        let g = t.concat(&parts)?;
        let g = t.reshape(g, &[2 * c])?;
        let s = [t.channel_pool(x, PoolMode::Avg)?, t.channel_pool(x, PoolMode::Max)?];
        let s = t.concat(&s)?;
        let s = t.reshape(s, &[2 * h * w])?;
        t.concat(&[g, s])
    })
}

/// Offsets whose sampling positions stay at least 0.1 px from the integer
/// grid, where bilinear interpolation has its kinks.
fn off_grid_offsets(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let whole = rng.random_range(-2..=1) as f64;
        whole + rng.random_range(0.1..0.9)
    })
}

fn build_deform(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let (c, o) = (rng.random_range(1..=3), rng.random_range(1..=2));
    let (stride, pad) = (rng.random_range(1..=2), rng.random_range(0..=1));
    let (h, w) = (rng.random_range(4..=6), rng.random_range(4..=6));
    let (oh, ow) = ((h + 2 * pad - 3) / stride + 1, (w + 2 * pad - 3) / stride + 1);
    let inputs = store(vec![
        ("x", Tensor::randn(&[c, h, w], 1.0, rng)),
        ("k", Tensor::randn(&[o, c, 3, 3], 0.5, rng)),
        ("b", Tensor::randn(&[o], 0.5, rng)),
        ("offsets", off_grid_offsets(&[18, oh, ow], rng)),
    ]);
    Problem::on_tape(vec![c, h, w], inputs, rng, move |t, b| {
        t.deform_conv2d(b.var("x")?, b.var("k")?, b.var("b")?, b.var("offsets")?, stride, pad)
    })
}

fn cbam_problem(
    rng: &mut ChaCha8Rng,
    gate: fn(&mut Tape, Var, &CbamVars) -> Result<Var>,
) -> Result<Problem> {
    let r = [1, 2][rng.random_range(0..2)];
    let c = r * rng.random_range(1..=3);
    let (h, w) = (rng.random_range(2..=5), rng.random_range(2..=5));
    let with_bias = rng.random_bool(0.5);
    let mut cw = CbamWeights::random(c, r, with_bias, rng)?;
    if with_bias {
        cw.b0 = Some(Tensor::randn(&[cw.hidden()], 0.3, rng));
        cw.b1 = Some(Tensor::randn(&[c], 0.3, rng));
    }
    cw.spatial.bias = Tensor::randn(&[1], 0.3, rng);
    let slope = cw.slope;
    let mut inputs = ParamStore::new();
    inputs.insert("x", Tensor::randn(&[c, h, w], 1.0, rng));
    cw.insert_into(&mut inputs, "blk");
    Problem::on_tape(vec![c, h, w], inputs, rng, move |t, b| {
        let v = CbamVars::from_bound(b, "blk", slope)?;
        gate(t, b.var("x")?, &v)
    })
}

fn build_channel_gate(rng: &mut ChaCha8Rng) -> Result<Problem> {
    cbam_problem(rng, channel_gate)
}

fn build_spatial_gate(rng: &mut ChaCha8Rng) -> Result<Problem> {
    cbam_problem(rng, spatial_gate)
}

fn build_cbam(rng: &mut ChaCha8Rng) -> Result<Problem> {
    cbam_problem(rng, cbam_forward)
}

fn build_fpn(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let widths = [1, 2, 3, 4].map(|_| rng.random_range(1..=3));
    let out = rng.random_range(1..=3);
    let mut side = rng.random_range(8..=10);
    let mut inputs = ParamStore::new();
    let mut shape = Vec::new();
    for (i, &c) in widths.iter().enumerate() {
        if i == 0 {
            shape = vec![c, side, side];
        }
        inputs.insert(format!("c{i}"), Tensor::randn(&[c, side, side], 1.0, rng));
        side = side.div_ceil(2);
    }
    let mut fw = FpnWeights::random(widths, out, rng);
    for l in &mut fw.laterals {
        l.bias = Tensor::randn(l.bias.shape(), 0.3, rng);
    }
    fw.insert_into(&mut inputs);
    Problem::on_tape(shape, inputs, rng, |t, b| {
        let c: Vec<Var> = (0..4).map(|i| b.var(&format!("c{i}"))).collect::<Result<_>>()?;
        let p = fpn_forward(t, &c, &bound_laterals(b)?)?;
        let flat: Vec<Var> = p
            .iter()
            .map(|&v| {
                let n = t.value(v)?.len();
                t.reshape(v, &[n])
            })
            .collect::<Result<_>>()?;
        t.concat(&flat)
    })
}

fn random_rois(rng: &mut ChaCha8Rng, n: usize, size: f64) -> Result<Vec<BBox>> {
    (0..n)
        .map(|_| {
            let x1 = rng.random_range(-2.0..size * 0.6);
            let y1 = rng.random_range(-2.0..size * 0.6);
            BBox::new(
                x1,
                y1,
                x1 + rng.random_range(1.0..size * 0.7),
                y1 + rng.random_range(1.0..size * 0.7),
            )
        })
        .collect()
}

fn roi_problem(rng: &mut ChaCha8Rng, mode: PoolMode) -> Result<Problem> {
    let c = rng.random_range(1..=3);
    let sizes = [rng.random_range(6..=9), rng.random_range(3..=5)];
    let scales = [0.5, 0.25];
    let mut inputs = ParamStore::new();
    for (i, s) in sizes.iter().enumerate() {
        inputs.insert(format!("level{i}"), Tensor::randn(&[c, *s, *s], 1.0, rng));
    }
    let cfg = RoiAlignConfig {
        out_h: rng.random_range(1..=3),
        out_w: rng.random_range(1..=3),
        sampling_ratio: rng.random_range(1..=3),
        pool_mode: mode,
        spatial_scale: 1.0,
    };
    let n = rng.random_range(1..=3);
    let rois = random_rois(rng, n, 16.0)?;
    let sources: Vec<RoiSource> = rois
        .into_iter()
        .map(|roi| {
            let level = rng.random_range(0..2);
            RoiSource {
                roi,
                level,
                cfg: cfg.with_scale(scales[level]),
            }
        })
        .collect();
    Problem::on_tape(vec![c, sizes[0], sizes[0]], inputs, rng, move |t, b| {
        let levels = [b.var("level0")?, b.var("level1")?];
        t.roi_align(&levels, &sources)
    })
}

fn build_roi_align(rng: &mut ChaCha8Rng) -> Result<Problem> {
    roi_problem(rng, PoolMode::Avg)
}

fn build_roi_align_max(rng: &mut ChaCha8Rng) -> Result<Problem> {
    roi_problem(rng, PoolMode::Max)
}

fn build_focal(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let n = 32;
    let gamma = [0.0, 0.5, 1.0, 2.0, 5.0][rng.random_range(0..5)];
    let fp = FocalParams::new(gamma, rng.random_range(0.05..1.0))?;
    let labels: Vec<u8> = (0..n).map(|_| rng.random_bool(0.3) as u8).collect();
    let labels2 = labels.clone();
    let inputs = store(vec![("logits", Tensor::rand_uniform(&[n], -6.0, 6.0, rng))]);
    // value through probabilities, gradient through the logit form
    let value = move |p: &ParamStore| -> Result<f64> {
        p.get("logits")?
            .data()
            .iter()
            .zip(&labels)
            .map(|(&t, &y)| focal_loss(sigmoid(t), y, fp))
            .sum()
    };
    let grad = move |p: &ParamStore| -> Result<ParamStore> {
        let t = p.get("logits")?;
        let g: Vec<f64> = t
            .data()
            .iter()
            .zip(&labels2)
            .map(|(&t, &y)| focal_loss_logit(t, y, fp).map(|r| r.1))
            .collect::<Result<_>>()?;
        Ok(store(vec![("logits", Tensor::new(t.shape(), g)?)]))
    };
    Ok(Problem::scalar(vec![n], inputs, value, grad))
}

fn build_box_regression(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let target: [f64; 4] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
    // stay 0.05 away from the quadratic-linear switch at |d| = 1
    let pred: Vec<f64> = target
        .iter()
        .map(|t| {
            let m = rng.random_range(0.0..0.9) + if rng.random_bool(0.5) { 1.1 } else { 0.0 };
            t + if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    let inputs = store(vec![("pred", Tensor::new(&[4], pred)?)]);
    let as4 = |p: &ParamStore| -> Result<[f64; 4]> {
        let d = p.get("pred")?.data();
        Ok([d[0], d[1], d[2], d[3]])
    };
    Ok(Problem::scalar(
        vec![4],
        inputs,
        move |p| Ok(box_regression_loss(&as4(p)?, &target)),
        move |p| Ok(store(vec![("pred", Tensor::new(&[4], box_regression_grad(&as4(p)?, &target).to_vec())?)])),
    ))
}

fn insert_conv(s: &mut ParamStore, name: &str, w: ConvWeights) {
    s.insert(format!("{name}.weight"), w.kernel);
    s.insert(format!("{name}.bias"), w.bias);
}

fn build_rpn(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let (c, a) = (rng.random_range(2..=4), rng.random_range(1..=3));
    let n_levels = rng.random_range(1..=2);
    let mut inputs = ParamStore::new();
    let mut side = rng.random_range(4..=6);
    let shape = vec![c, side, side];
    for l in 0..n_levels {
        inputs.insert(format!("p{l}"), Tensor::randn(&[c, side, side], 1.0, rng));
        side = side.div_ceil(2);
    }
    let conv = |o, k, pad, rng: &mut ChaCha8Rng| {
        let mut w = ConvWeights::he_normal(o, c, k, k, 1, pad, rng);
        w.bias = Tensor::randn(&[o], 0.3, rng);
        w
    };
    let (w_conv, w_cls, w_box) = (conv(c, 3, 1, rng), conv(a, 1, 0, rng), conv(4 * a, 1, 0, rng));
    insert_conv(&mut inputs, "rpn.conv", w_conv);
    insert_conv(&mut inputs, "rpn.cls", w_cls);
    insert_conv(&mut inputs, "rpn.box", w_box);
    Problem::on_tape(shape, inputs, rng, move |t, b| {
        let levels: Vec<Var> = (0..n_levels).map(|l| b.var(&format!("p{l}"))).collect::<Result<_>>()?;
        let out = rpn_forward_tape(t, &levels, &RpnVars::from_bound(b)?)?;
        let flat: Vec<Var> = out
            .objectness
            .iter()
            .chain(&out.deltas)
            .map(|&v| {
                let n = t.value(v)?.len();
                t.reshape(v, &[n])
            })
            .collect::<Result<_>>()?;
        t.concat(&flat)
    })
}

fn build_head(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let mut cfg = ModelConfig::toy();
    cfg.num_classes = rng.random_range(1..=3);
    cfg.head.fc_dim = rng.random_range(3..=6);
    cfg.head.roi_align.out_h = 2;
    cfg.head.roi_align.out_w = 2;
    let c = rng.random_range(1..=3);
    let side = rng.random_range(5..=8);
    let mut inputs = ParamStore::new();
    inputs.insert("p0", Tensor::randn(&[c, side, side], 1.0, rng));
    let pooled = c * 4;
    let fc = cfg.head.fc_dim;
    for (name, o, i) in [
        ("head.fc1", fc, pooled),
        ("head.fc2", fc, fc),
        ("head.cls", cfg.num_classes, fc),
        ("head.box", 4, fc),
    ] {
        inputs.insert(format!("{name}.weight"), Tensor::randn(&[o, i], (2.0 / i as f64).sqrt(), rng));
        inputs.insert(format!("{name}.bias"), Tensor::randn(&[o], 0.3, rng));
    }
    let roi_cfg = cfg.head.roi_align.with_scale(0.5);
    let n = rng.random_range(1..=3);
    let sources: Vec<RoiSource> = random_rois(rng, n, 2.0 * side as f64)?
        .into_iter()
        .map(|roi| RoiSource {
            roi,
            level: 0,
            cfg: roi_cfg,
        })
        .collect();
    Problem::on_tape(vec![c, side, side], inputs, rng, move |t, b| {
        let (cls, bbox) = head_forward_tape(t, &[b.var("p0")?], &sources, &HeadVars::from_bound(b)?)?;
        let r = t.value(cls)?.shape()[0];
        let cls = t.reshape(cls, &[r * t.value(cls)?.shape()[1]])?;
        let bbox = t.reshape(bbox, &[r * 4])?;
        t.concat(&[cls, bbox])
    })
}
