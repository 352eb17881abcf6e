//! Greedy non-maximum suppression.

use crate::geometry::{iou, BBox};

/// Indices of the kept boxes in descending score order. A box is dropped
/// when its IoU with an already kept box exceeds `iou_threshold`; equal
/// scores keep the lower original index first.
pub fn nms_indices(boxes: &[BBox], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (boxes[a].score.unwrap_or(0.0), boxes[b].score.unwrap_or(0.0));
        sb.total_cmp(&sa).then(a.cmp(&b))
    });
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

pub fn nms(dets: &[BBox], iou_threshold: f64) -> Vec<BBox> {
    nms_indices(dets, iou_threshold).into_iter().map(|i| dets[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(x: f64, s: f64) -> BBox {
        BBox::new(x, 0.0, x + 10.0, 10.0).unwrap().with_score(s)
    }

    #[test]
    fn reference_cases() {
        assert_eq!(nms(&[d(0.0, 0.3)], 0.5), vec![d(0.0, 0.3)]);
        assert_eq!(nms(&[d(0.0, 0.8), d(0.0, 0.9)], 0.5), vec![d(0.0, 0.9)]);
        assert_eq!(nms(&[d(0.0, 0.2), d(50.0, 0.7)], 0.5), vec![d(50.0, 0.7), d(0.0, 0.2)]);
        // ties resolve to the lower index
        assert_eq!(nms_indices(&[d(0.0, 0.5), d(1.0, 0.5)], 0.5), vec![0]);
    }
}
