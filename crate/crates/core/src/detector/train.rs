//! Per-image losses with gradients and the minibatch SGD loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::infer::{generate_proposals, HEAD_CODER, RPN_CODER};
use super::matching::{assign_targets, sample_labels, AnchorLabel};
use super::model::{
    features_forward, flat_anchors, flatten_rpn, head_forward_tape, roi_sources, rpn_forward_tape, unflatten_rpn,
    Detector, HeadVars, RpnVars,
};
use crate::autograd::Tape;
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::loss::{focal_loss_logit, smooth_l1, smooth_l1_grad, FocalParams};
use crate::optim::SgdState;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub rpn_cls: f64,
    pub rpn_box: f64,
    pub head_cls: f64,
    pub head_box: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, o: &LossBreakdown, s: f64) {
        self.total += s * o.total;
        self.rpn_cls += s * o.rpn_cls;
        self.rpn_box += s * o.rpn_box;
        self.head_cls += s * o.head_cls;
        self.head_box += s * o.head_box;
    }

    fn parts(&self) -> [(&'static str, f64); 5] {
        [
            ("total", self.total),
            ("rpn_cls", self.rpn_cls),
            ("rpn_box", self.rpn_box),
            ("head_cls", self.head_cls),
            ("head_box", self.head_box),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub losses: LossBreakdown,
}

/// Loss curve as CSV with the header
/// `epoch,step,total,rpn_cls,rpn_box,head_cls,head_box`.
pub fn curve_csv(curve: &[LossRecord]) -> String {
    let mut s = String::from("epoch,step,total,rpn_cls,rpn_box,head_cls,head_box\n");
    for r in curve {
        let l = &r.losses;
        s.push_str(&format!(
            "{},{},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
            r.epoch, r.step, l.total, l.rpn_cls, l.rpn_box, l.head_cls, l.head_box
        ));
    }
    s
}

/// Mixes run coordinates into one generator seed (SplitMix64 finaliser).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut z = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        z ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(z << 6).wrapping_add(z >> 2);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

fn classifier_params(det: &Detector) -> FocalParams {
    if det.config.toggles.focal {
        det.config.focal
    } else {
        FocalParams::cross_entropy()
    }
}

/// Losses of one image and the gradient of their weighted sum.
pub fn image_losses(det: &Detector, sample: &Sample, rng: &mut ChaCha8Rng) -> Result<(LossBreakdown, ParamStore)> {
    let cfg = &det.config;
    let fp = classifier_params(det);
    let focal = cfg.toggles.focal;
    let weights = cfg.loss_weights;
    let (_, h, w) = sample.image.dims3()?;
    let gts = &sample.boxes;

    let mut tape = Tape::new();
    let bound = det.params.bind(&mut tape);
    let feats = features_forward(&mut tape, &bound, cfg, &sample.image)?;
    let rpn = rpn_forward_tape(&mut tape, &feats.levels, &RpnVars::from_bound(&bound)?)?;
    let (logits, deltas) = flatten_rpn(&tape, &rpn)?;
    let anchors = flat_anchors(cfg, h, w)?;

    // region proposal losses
    let labels = assign_targets(&anchors, gts, &cfg.rpn.thresholds)?;
    let selected: Vec<usize> = if focal {
        (0..labels.len()).filter(|&i| labels[i] != AnchorLabel::Ignore).collect()
    } else {
        sample_labels(&labels, cfg.rpn.batch_per_image, cfg.rpn.positive_fraction, rng)
    };
    let n_pos = selected.iter().filter(|&&i| labels[i].is_positive()).count();
    let norm = if focal { n_pos.max(1) } else { selected.len().max(1) } as f64;
    let mut losses = LossBreakdown::default();
    let mut g_logits = vec![0.0; anchors.len()];
    let mut g_deltas = vec![[0.0; 4]; anchors.len()];
    for &i in &selected {
        let y = labels[i].is_positive() as u8;
        let (l, g) = focal_loss_logit(logits[i], y, fp)?;
        losses.rpn_cls += l / norm;
        g_logits[i] = weights.rpn_cls * g / norm;
        if let AnchorLabel::Positive(j) = labels[i] {
            let t = RPN_CODER.encode(&anchors[i], &gts[j]);
            for c in 0..4 {
                let d = deltas[i][c] - t[c];
                losses.rpn_box += smooth_l1(d, 1.0) / norm;
                g_deltas[i][c] = weights.rpn_box * smooth_l1_grad(d, 1.0) / norm;
            }
        }
    }
    let mut seeds = unflatten_rpn(&tape, &rpn, &g_logits, &g_deltas)?;

    // second stage on sampled proposals plus the ground truth
    let mut rois = generate_proposals(cfg, &anchors, &logits, &deltas, h, w);
    rois.extend(gts.iter().map(|g| BBox {
        score: Some(1.0),
        label: None,
        ..*g
    }));
    let roi_labels: Vec<AnchorLabel> = rois
        .iter()
        .map(|r| {
            let best = gts
                .iter()
                .enumerate()
                .map(|(j, g)| (j, iou(r, g)))
                .fold(None, |acc: Option<(usize, f64)>, x| match acc {
                    Some(a) if a.1 >= x.1 => Some(a),
                    _ => Some(x),
                });
            match best {
                Some((j, v)) if v >= cfg.head.positive_iou => AnchorLabel::Positive(j),
                _ => AnchorLabel::Negative,
            }
        })
        .collect();
    let picked = sample_labels(&roi_labels, cfg.head.batch_per_image, cfg.head.positive_fraction, rng);
    if !picked.is_empty() {
        let chosen: Vec<BBox> = picked.iter().map(|&i| rois[i]).collect();
        let sources = roi_sources(cfg, &feats, &chosen);
        let (cls, bbox) = head_forward_tape(&mut tape, &feats.levels, &sources, &HeadVars::from_bound(&bound)?)?;
        let k = cfg.num_classes;
        let n_pos = picked.iter().filter(|&&i| roi_labels[i].is_positive()).count();
        let norm = if focal { n_pos.max(1) } else { picked.len() } as f64;
        let box_norm = picked.len() as f64;
        let cls_v = tape.value(cls)?;
        let box_v = tape.value(bbox)?;
        let mut g_cls = Tensor::zeros(cls_v.shape());
        let mut g_box = Tensor::zeros(box_v.shape());
        for (r, &i) in picked.iter().enumerate() {
            let target = match roi_labels[i] {
                AnchorLabel::Positive(j) => gts[j].label,
                _ => None,
            };
            for c in 0..k {
                let (l, g) = focal_loss_logit(cls_v.data()[r * k + c], (target == Some(c)) as u8, fp)?;
                losses.head_cls += l / norm;
                g_cls.data_mut()[r * k + c] = weights.head_cls * g / norm;
            }
            if let AnchorLabel::Positive(j) = roi_labels[i] {
                let t = HEAD_CODER.encode(&rois[i], &gts[j]);
                for c in 0..4 {
                    let d = box_v.data()[r * 4 + c] - t[c];
                    losses.head_box += smooth_l1(d, 1.0) / box_norm;
                    g_box.data_mut()[r * 4 + c] = weights.head_box * smooth_l1_grad(d, 1.0) / box_norm;
                }
            }
        }
        seeds.push((cls, g_cls));
        seeds.push((bbox, g_box));
    }
    losses.total = weights.rpn_cls * losses.rpn_cls
        + weights.rpn_box * losses.rpn_box
        + weights.head_cls * losses.head_cls
        + weights.head_box * losses.head_box;
    if let Some((name, _)) = losses.parts().iter().find(|(_, v)| !v.is_finite()) {
        let culprit = tape
            .first_non_finite()
            .map_or_else(|| format!("loss term `{name}`"), |v| tape.describe(v));
        return Err(Error::NonFinite(format!("{culprit} (image `{}`)", sample.id)));
    }
    let mut grads = tape.backward(&seeds)?;
    let grads = bound.gradients(&det.params, &mut grads)?;
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of `{name}` (image `{}`)", sample.id)));
    }
    Ok((losses, grads))
}

/// Worker count from `DANET_THREADS`, defaulting to one.
pub fn thread_count() -> usize {
    std::env::var("DANET_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub detector: Detector,
    pub curve: Vec<LossRecord>,
}

impl TrainOutcome {
    /// Loss of the first step.
    pub fn initial_loss(&self) -> Option<f64> {
        self.curve.first().map(|r| r.losses.total)
    }

    /// Mean loss over the final epoch's steps.
    pub fn final_loss(&self) -> Option<f64> {
        let last = self.curve.last()?.epoch;
        let tail: Vec<f64> = self.curve.iter().filter(|r| r.epoch == last).map(|r| r.losses.total).collect();
        Some(tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

fn global_norm(g: &ParamStore) -> f64 {
    g.iter().map(|(_, t)| t.dot(t)).sum::<f64>().sqrt()
}

/// Minibatch SGD over `data`. Images of a batch are processed in parallel
/// and their gradients summed in batch order, so results do not depend on
/// the worker count.
pub fn train(
    mut det: Detector,
    data: &Dataset,
    tc: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("dataset", "training needs at least one image"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut state = SgdState::new(tc.sgd);
    let mut curve = Vec::new();
    let mut step = 0usize;
    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 1, epoch as u64])));
        let lr_epoch = tc.schedule.lr_at(tc.sgd.lr, epoch);
        for batch in order.chunks(tc.batch_size) {
            let results: Vec<Result<(LossBreakdown, ParamStore)>> = pool.install(|| {
                batch
                    .par_iter()
                    .enumerate()
                    .map(|(slot, &i)| {
                        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 2, step as u64, slot as u64]));
                        image_losses(&det, &data.samples[i], &mut rng)
                    })
                    .collect()
            });
            let scale = 1.0 / batch.len() as f64;
            let mut losses = LossBreakdown::default();
            let mut grads: Option<ParamStore> = None;
            for r in results {
                let (l, g) = r?;
                losses.add_scaled(&l, scale);
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (name, t) in acc.iter_mut() {
                            t.add_assign(g.get(name)?)?;
                        }
                    }
                }
            }
            let mut grads = grads.expect("non-empty batch");
            let mut factor = scale;
            if tc.clip_grad_norm > 0.0 {
                let n = global_norm(&grads) * scale;
                if n > tc.clip_grad_norm {
                    factor *= tc.clip_grad_norm / n;
                }
            }
            for (_, t) in grads.iter_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= factor);
            }
            let warm = if tc.warmup_steps > 0 && step < tc.warmup_steps {
                (step + 1) as f64 / tc.warmup_steps as f64
            } else {
                1.0
            };
            state.step(&mut det.params, &grads, lr_epoch * warm)?;
            if let Some((name, _)) = det.params.iter().find(|(_, t)| !t.is_finite()) {
                return Err(Error::NonFinite(format!("parameter `{name}` after step {step}")));
            }
            let rec = LossRecord { epoch, step, losses };
            on_step(&rec);
            curve.push(rec);
            step += 1;
        }
    }
    Ok(TrainOutcome { detector: det, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_splits, SyntheticSpec};
    use crate::detector::config::ModelConfig;

    fn small() -> ModelConfig {
        let mut c = ModelConfig::toy();
        c.pyramid_channels = 8;
        c.head.fc_dim = 16;
        c
    }

    fn data() -> Dataset {
        let spec = SyntheticSpec {
            width: 64,
            height: 64,
            max_side: 16,
            ..Default::default()
        };
        synthetic_splits(&spec, 3, 0).unwrap().0
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let det = Detector::new(small(), 1).unwrap();
        let mut tc = TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..Default::default()
        };
        tc.sgd.lr = 0.0;
        let out = train(det.clone(), &data(), &tc, 5, |_| {}).unwrap();
        assert_eq!(out.detector.params, det.params);
        assert_eq!(out.curve.len(), 2);
        assert!(out.curve.iter().all(|r| r.losses.total.is_finite() && r.losses.total > 0.0));
    }

    #[test]
    fn zero_epochs_return_the_initialisation() {
        let det = Detector::new(small(), 1).unwrap();
        let tc = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = train(det.clone(), &data(), &tc, 5, |_| {}).unwrap();
        assert_eq!(out.detector, det);
        assert!(out.curve.is_empty());
    }

    #[test]
    fn nan_input_is_reported_by_name() {
        let det = Detector::new(small(), 1).unwrap();
        let mut d = data();
        d.samples[0].image.data_mut()[10] = f64::NAN;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match image_losses(&det, &d.samples[0], &mut rng) {
            Err(Error::NonFinite(m)) => assert!(m.contains("image") || m.contains("backbone"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_header() {
        assert!(curve_csv(&[]).starts_with("epoch,step,total,rpn_cls,rpn_box,head_cls,head_box\n"));
    }
}
