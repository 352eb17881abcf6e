//! Precision/recall counts and COCO-style average precision.
//!
//! Detections are matched greedily in descending score order; each ground
//! truth box can be claimed once. AP is the mean of the interpolated
//! precision envelope at the 101 recall points `0.00, 0.01, ..., 1.00`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

pub const RECALL_POINTS: usize = 101;

/// IoU thresholds `0.50, 0.55, ..., 0.95`.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MatchCounts {
    pub fn merge(&mut self, o: &MatchCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// `(TP / (TP + FP), TP / (TP + FN))`, with `0 / 0` read as 0.
pub fn precision_recall(c: &MatchCounts) -> (f64, f64) {
    (ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.fn_))
}

/// Matches detections of one image against its ground truth.
///
/// `dets` must be sorted by descending score. A detection is a true positive
/// when the unclaimed ground-truth box of its class with the highest IoU
/// reaches `iou_thr`. Returns the counts and one flag per detection.
pub fn match_detections(dets: &[BBox], gts: &[BBox], iou_thr: f64) -> Result<(MatchCounts, Vec<bool>)> {
    for pair in dets.windows(2) {
        if pair[0].score.unwrap_or(0.0) < pair[1].score.unwrap_or(0.0) {
            return Err(Error::Validation("detections must be sorted by descending score".into()));
        }
    }
    let mut claimed = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    let mut counts = MatchCounts::default();
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if claimed[j] || g.label != d.label {
                continue;
            }
            let v = iou(d, g);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        let hit = match best {
            Some((j, v)) if v >= iou_thr => {
                claimed[j] = true;
                true
            }
            _ => false,
        };
        if hit {
            counts.tp += 1;
        } else {
            counts.fp += 1;
        }
        flags.push(hit);
    }
    counts.fn_ = claimed.iter().filter(|c| !**c).count();
    Ok((counts, flags))
}

/// 101-point interpolated AP of score-ranked hit flags against `n_gt`
/// ground-truth boxes. `None` without ground truth: such a class is left
/// out of the mean, whatever was detected for it.
pub fn average_precision(flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        points.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // envelope[i] = max precision at rank >= i
    let mut envelope = vec![0.0; points.len()];
    let mut run = 0.0f64;
    for i in (0..points.len()).rev() {
        run = run.max(points[i].1);
        envelope[i] = run;
    }
    let mut total = 0.0;
    let mut i = 0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        // recall is non-decreasing along the ranking
        while i < points.len() && points[i].0 + 1e-12 < r {
            i += 1;
        }
        if i < points.len() {
            total += envelope[i];
        }
    }
    Some(total / RECALL_POINTS as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    pub n_gt: usize,
    /// AP averaged over all IoU thresholds; `None` if the class is excluded.
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    /// Counts per IoU threshold, aligned with the report's thresholds.
    pub counts: Vec<MatchCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_thresholds: Vec<f64>,
    pub classes: Vec<ClassReport>,
    /// Mean of the evaluated classes' IoU-averaged AP.
    pub map: f64,
    /// Mean of the evaluated classes' AP at IoU 0.5.
    pub map50: f64,
}

fn mean(vals: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = vals.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Evaluates labelled, scored detections against labelled ground truth,
/// both given per image.
pub fn coco_map(dets: &[Vec<BBox>], gts: &[Vec<BBox>], class_names: &[String]) -> Result<EvalReport> {
    if dets.len() != gts.len() {
        return Err(Error::invalid(
            "dets",
            format!("{} detection lists for {} images", dets.len(), gts.len()),
        ));
    }
    let thresholds = coco_iou_thresholds();
    let mut classes = Vec::with_capacity(class_names.len());
    for (c, name) in class_names.iter().enumerate() {
        let label = Some(c);
        // global ranking of this class's detections; stable on ties
        let mut ranked: Vec<(usize, BBox)> = dets
            .iter()
            .enumerate()
            .flat_map(|(img, ds)| ds.iter().filter(|d| d.label == label).map(move |d| (img, *d)))
            .collect();
        ranked.sort_by(|a, b| b.1.score.unwrap_or(0.0).total_cmp(&a.1.score.unwrap_or(0.0)));
        let class_gts: Vec<Vec<BBox>> = gts
            .iter()
            .map(|g| g.iter().filter(|b| b.label == label).copied().collect())
            .collect();
        let n_gt: usize = class_gts.iter().map(Vec::len).sum();

        let mut aps = Vec::with_capacity(thresholds.len());
        let mut counts = Vec::with_capacity(thresholds.len());
        for &thr in &thresholds {
            let mut per_image: Vec<Vec<(usize, BBox)>> = vec![Vec::new(); gts.len()];
            for (rank, (img, d)) in ranked.iter().enumerate() {
                per_image[*img].push((rank, *d));
            }
            let mut flags = vec![false; ranked.len()];
            let mut total = MatchCounts::default();
            for (img, list) in per_image.iter().enumerate() {
                let boxes: Vec<BBox> = list.iter().map(|(_, d)| *d).collect();
                let (cnt, f) = match_detections(&boxes, &class_gts[img], thr)?;
                total.merge(&cnt);
                for ((rank, _), hit) in list.iter().zip(f) {
                    flags[*rank] = hit;
                }
            }
            aps.push(average_precision(&flags, n_gt));
            counts.push(total);
        }
        let ap = if aps.iter().any(Option::is_none) {
            None
        } else {
            Some(mean(aps.iter().flatten().copied()))
        };
        classes.push(ClassReport {
            name: name.clone(),
            n_gt,
            ap,
            ap50: aps[0],
            counts,
        });
    }
    Ok(EvalReport {
        map: mean(classes.iter().filter_map(|c| c.ap)),
        map50: mean(classes.iter().filter_map(|c| c.ap50)),
        iou_thresholds: thresholds,
        classes,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Header of class columns followed by `mAP`, with one row for the
    /// IoU-averaged metric and one for IoU 0.5. Excluded classes are blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric");
        for c in &self.classes {
            out.push(',');
            out.push_str(&c.name);
        }
        out.push_str(",mAP\n");
        out.push_str("AP@[.50:.95]");
        for c in &self.classes {
            out.push(',');
            out.push_str(&cell(c.ap));
        }
        out.push_str(&format!(",{:.6}\n", self.map));
        out.push_str("AP@.50");
        for c in &self.classes {
            out.push(',');
            out.push_str(&cell(c.ap50));
        }
        out.push_str(&format!(",{:.6}\n", self.map50));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64, label: usize) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap().with_label(label)
    }

    #[test]
    fn precision_recall_cases() {
        assert_eq!(precision_recall(&MatchCounts { tp: 8, fp: 2, fn_: 0 }).0, 0.8);
        assert_eq!(precision_recall(&MatchCounts { tp: 0, fp: 0, fn_: 5 }).1, 0.0);
        assert_eq!(precision_recall(&MatchCounts::default()), (0.0, 0.0));
    }

    #[test]
    fn matching_rules() {
        let g = b(0.0, 0.0, 10.0, 10.0, 0);
        let (c, f) = match_detections(&[g.with_score(0.9)], &[g], 0.5).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, f), (1, 0, 0, vec![true]));
        let (c, f) = match_detections(&[g.with_score(0.9), g.with_score(0.8)], &[g], 0.5).unwrap();
        assert_eq!((c.tp, c.fp, f), (1, 1, vec![true, false]));
        let wrong = g.with_label(1).with_score(0.9);
        let (c, _) = match_detections(&[wrong], &[g], 0.5).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (0, 1, 1));
        assert!(match_detections(&[g.with_score(0.1), g.with_score(0.2)], &[g], 0.5).is_err());
    }

    #[test]
    fn ap_reference_cases() {
        assert_eq!(average_precision(&[true], 1), Some(1.0));
        assert_eq!(average_precision(&[false], 1), Some(0.0));
        let ap = average_precision(&[true, false, true], 2).unwrap();
        assert!((ap - (51.0 + 50.0 * 2.0 / 3.0) / 101.0).abs() < 1e-12);
        assert!((ap - 0.834_983_498).abs() < 1e-9);
        assert_eq!(average_precision(&[], 0), None);
        assert_eq!(average_precision(&[false], 0), None);
        assert_eq!(average_precision(&[], 3), Some(0.0));
    }

    #[test]
    fn perfect_and_empty_detectors() {
        let names = vec!["a".to_string(), "b".to_string()];
        let gts = vec![vec![b(0.0, 0.0, 5.0, 5.0, 0), b(10.0, 10.0, 20.0, 18.0, 1)]];
        let perfect: Vec<Vec<BBox>> = gts.iter().map(|g| g.iter().map(|x| x.with_score(0.9)).collect()).collect();
        let r = coco_map(&perfect, &gts, &names).unwrap();
        assert_eq!((r.map, r.map50), (1.0, 1.0));
        let r = coco_map(&[vec![]], &gts, &names).unwrap();
        assert_eq!(r.map, 0.0);
        let csv = r.to_csv();
        assert!(csv.starts_with("metric,a,b,mAP\n"));
    }

    #[test]
    fn class_without_gt_or_detections_is_excluded() {
        let names = vec!["a".to_string(), "b".to_string()];
        let gts = vec![vec![b(0.0, 0.0, 5.0, 5.0, 0)]];
        let dets = vec![vec![b(0.0, 0.0, 5.0, 5.0, 0).with_score(0.7)]];
        let r = coco_map(&dets, &gts, &names).unwrap();
        assert_eq!(r.classes[1].ap, None);
        assert_eq!(r.map, 1.0);
    }
}
