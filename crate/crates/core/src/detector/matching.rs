//! Anchor/proposal labelling against ground truth and minibatch sampling.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchThresholds {
    pub positive_iou: f64,
    pub negative_iou: f64,
}

impl MatchThresholds {
    pub const RPN: MatchThresholds = MatchThresholds {
        positive_iou: 0.7,
        negative_iou: 0.3,
    };

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.negative_iou && self.negative_iou < self.positive_iou && self.positive_iou <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= negative_iou < positive_iou <= 1, got {} and {}",
                self.negative_iou, self.positive_iou
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignore,
}

impl AnchorLabel {
    pub fn is_positive(self) -> bool {
        matches!(self, AnchorLabel::Positive(_))
    }
}

/// Labels each anchor: IoU at or above `positive_iou` is positive (matched
/// to its highest-IoU box), at or below `negative_iou` negative, anything
/// between ignored. Each box's best anchors (all ties) are forced positive.
pub fn assign_targets(anchors: &[BBox], gts: &[BBox], t: &MatchThresholds) -> Result<Vec<AnchorLabel>> {
    t.validate()?;
    let mut labels = Vec::with_capacity(anchors.len());
    let mut best_for_gt = vec![0.0f64; gts.len()];
    let mut ious = vec![0.0; gts.len()];
    let mut table = Vec::with_capacity(anchors.len());
    for a in anchors {
        let mut best = (0.0, None);
        for (j, g) in gts.iter().enumerate() {
            ious[j] = iou(a, g);
            best_for_gt[j] = best_for_gt[j].max(ious[j]);
            if best.1.is_none() || ious[j] > best.0 {
                best = (ious[j], Some(j));
            }
        }
        labels.push(match best {
            (v, Some(j)) if v >= t.positive_iou => AnchorLabel::Positive(j),
            (v, _) if v <= t.negative_iou => AnchorLabel::Negative,
            _ => AnchorLabel::Ignore,
        });
        table.push(ious.clone());
    }
    for (j, &best) in best_for_gt.iter().enumerate() {
        if best <= 0.0 {
            continue;
        }
        for (i, row) in table.iter().enumerate() {
            if row[j] == best && !labels[i].is_positive() {
                labels[i] = AnchorLabel::Positive(j);
            }
        }
    }
    Ok(labels)
}

/// Picks at most `batch` indices, at most `positive_fraction` of them
/// positive, filling the rest with negatives. Order: positives then
/// negatives, each in random order.
pub fn sample_labels<R: Rng + ?Sized>(
    labels: &[AnchorLabel],
    batch: usize,
    positive_fraction: f64,
    rng: &mut R,
) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_positive()).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == AnchorLabel::Negative).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let n_pos = pos.len().min((batch as f64 * positive_fraction).floor() as usize);
    let n_neg = neg.len().min(batch - n_pos);
    pos.truncate(n_pos);
    pos.extend_from_slice(&neg[..n_neg]);
    pos
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn band_membership() {
        let gt = b(0.0, 0.0, 10.0, 10.0);
        // IoU 0.5: [0,0,10,5] inside the gt covers half of it
        let anchors = [gt, b(50.0, 50.0, 60.0, 60.0), b(0.0, 0.0, 10.0, 5.0)];
        let l = assign_targets(&anchors, &[gt], &MatchThresholds::RPN).unwrap();
        assert_eq!(l, vec![AnchorLabel::Positive(0), AnchorLabel::Negative, AnchorLabel::Ignore]);
    }

    #[test]
    fn best_anchor_is_forced_positive() {
        let gt = b(0.0, 0.0, 10.0, 10.0);
        let anchors = [b(0.0, 0.0, 10.0, 4.0), b(0.0, 0.0, 10.0, 2.0)];
        let l = assign_targets(&anchors, &[gt], &MatchThresholds::RPN).unwrap();
        assert_eq!(l, vec![AnchorLabel::Positive(0), AnchorLabel::Negative]);
        let none = assign_targets(&anchors, &[], &MatchThresholds::RPN).unwrap();
        assert!(none.iter().all(|&x| x == AnchorLabel::Negative));
    }

    #[test]
    fn sampling_respects_quota() {
        let mut labels = vec![AnchorLabel::Negative; 100];
        for l in labels.iter_mut().take(40) {
            *l = AnchorLabel::Positive(0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_labels(&labels, 32, 0.25, &mut rng);
        assert_eq!(s.len(), 32);
        assert_eq!(s.iter().filter(|&&i| labels[i].is_positive()).count(), 8);
    }
}
