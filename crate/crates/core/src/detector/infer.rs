//! Proposal generation and final detection decoding.

use super::anchors::BoxCoder;
use super::config::ModelConfig;
use super::model::{
    features_forward, flat_anchors, flatten_rpn, head_forward_tape, roi_sources, rpn_forward_tape, Detector, HeadVars,
    RpnVars,
};
use super::nms::nms_indices;
use crate::autograd::Tape;
use crate::error::Result;
use crate::geometry::BBox;
use crate::ops::sigmoid;
use crate::tensor::Tensor;

pub const RPN_CODER: BoxCoder = BoxCoder::new([1.0, 1.0, 1.0, 1.0]);
pub const HEAD_CODER: BoxCoder = BoxCoder::new([10.0, 10.0, 5.0, 5.0]);

/// Decodes, clips and filters anchors into scored proposals: best
/// `pre_nms_top_n` by objectness, NMS, then the first `post_nms_top_n`.
pub fn generate_proposals(
    cfg: &ModelConfig,
    anchors: &[BBox],
    logits: &[f64],
    deltas: &[[f64; 4]],
    height: usize,
    width: usize,
) -> Vec<BBox> {
    let mut order: Vec<usize> = (0..anchors.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let mut boxes = Vec::with_capacity(cfg.rpn.pre_nms_top_n);
    for i in order {
        if boxes.len() == cfg.rpn.pre_nms_top_n {
            break;
        }
        let b = RPN_CODER
            .decode(&anchors[i], &deltas[i])
            .clip(width as f64, height as f64)
            .with_score(sigmoid(logits[i]));
        if b.width() >= cfg.rpn.min_size && b.height() >= cfg.rpn.min_size && b.validate().is_ok() {
            boxes.push(b);
        }
    }
    let mut keep = nms_indices(&boxes, cfg.rpn.nms_iou);
    keep.truncate(cfg.rpn.post_nms_top_n);
    keep.into_iter().map(|i| boxes[i]).collect()
}

/// Runs the full network on one `[C, H, W]` image in `[0, 1]` and returns
/// labelled, scored detections sorted by descending score.
pub fn detect(det: &Detector, image: &Tensor) -> Result<Vec<BBox>> {
    detect_with(det, image, det.config.head.score_threshold, det.config.head.nms_iou)
}

pub fn detect_with(det: &Detector, image: &Tensor, score_thr: f64, nms_thr: f64) -> Result<Vec<BBox>> {
    let cfg = &det.config;
    let (_, h, w) = image.dims3()?;
    let mut tape = Tape::new();
    let bound = det.params.bind(&mut tape);
    let feats = features_forward(&mut tape, &bound, cfg, image)?;
    let rpn = rpn_forward_tape(&mut tape, &feats.levels, &RpnVars::from_bound(&bound)?)?;
    let (logits, deltas) = flatten_rpn(&tape, &rpn)?;
    let anchors = flat_anchors(cfg, h, w)?;
    let proposals = generate_proposals(cfg, &anchors, &logits, &deltas, h, w);
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let sources = roi_sources(cfg, &feats, &proposals);
    let (cls, bbox) = head_forward_tape(&mut tape, &feats.levels, &sources, &HeadVars::from_bound(&bound)?)?;
    let (cls, bbox) = (tape.value(cls)?, tape.value(bbox)?);
    let k = cfg.num_classes;
    let mut out = Vec::new();
    for c in 0..k {
        let mut cands = Vec::new();
        for (r, p) in proposals.iter().enumerate() {
            let score = sigmoid(cls.data()[r * k + c]);
            if score <= score_thr {
                continue;
            }
            let d: [f64; 4] = std::array::from_fn(|j| bbox.data()[r * 4 + j]);
            let b = HEAD_CODER.decode(p, &d).clip(w as f64, h as f64);
            if b.validate().is_ok() {
                cands.push(b.with_score(score).with_label(c));
            }
        }
        out.extend(nms_indices(&cands, nms_thr).into_iter().map(|i| cands[i]));
    }
    // stable: equal scores keep class order
    out.sort_by(|a, b| b.score.unwrap_or(0.0).total_cmp(&a.score.unwrap_or(0.0)));
    out.truncate(cfg.head.max_detections);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::config::ModelConfig;

    fn small() -> ModelConfig {
        let mut c = ModelConfig::toy();
        c.pyramid_channels = 8;
        c.head.fc_dim = 16;
        c
    }

    #[test]
    fn proposals_are_clipped_and_valid() {
        let cfg = small();
        let anchors = flat_anchors(&cfg, 64, 64).unwrap();
        let n = anchors.len();
        let logits: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let deltas: Vec<[f64; 4]> = (0..n).map(|i| [(i as f64).cos(), 0.3, 0.5, -0.2]).collect();
        let p = generate_proposals(&cfg, &anchors, &logits, &deltas, 64, 64);
        assert!(!p.is_empty() && p.len() <= cfg.rpn.post_nms_top_n);
        for b in &p {
            b.validate().unwrap();
            assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 64.0 && b.y2 <= 64.0);
        }
    }

    #[test]
    fn untrained_net_on_blank_image() {
        let det = Detector::new(small(), 7).unwrap();
        let blank = Tensor::zeros(&[1, 64, 64]);
        assert!(detect_with(&det, &blank, 0.99, 0.5).unwrap().is_empty());
        let a = detect(&det, &blank).unwrap();
        assert_eq!(a, detect(&det, &blank).unwrap());
        assert!(a.iter().all(|d| (d.score.unwrap() - 0.5).abs() < 0.05));
    }
}
