//! Detection and classification metrics, locked to brute-force oracles.
//!
//! Average precision is computed in exact rational arithmetic and converted
//! to f64 once at the end, so it can be compared bit-for-bit against the
//! independent threshold-enumeration oracle in [`oracle`]. AUC accumulates
//! the ROC trapezoids as integers and performs a single final division,
//! which makes it bit-equal to the Mann-Whitney pair-counting statistic.

pub mod oracle;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::detector::{iou, BBox};
use crate::error::{Error, Result};

// ---- confusion counts and scalar metrics ------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

/// Count a binary confusion table. Sequences must have equal length.
pub fn confusion(pred: &[bool], truth: &[bool]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::Data(format!(
            "{} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    /// (TP+TN)/(TP+FP+FN+TN); None when no decisions were evaluated.
    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.true_pos + self.true_neg, self.total())
    }

    /// TN/(FP+TN); None when there are no negatives.
    pub fn specificity(&self) -> Option<f64> {
        ratio(self.true_neg, self.false_pos + self.true_neg)
    }

    /// TP/(TP+FN); None when there are no positives.
    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.true_pos, self.true_pos + self.false_neg)
    }

    /// TP/(TP+FP); None when nothing was predicted positive.
    pub fn precision(&self) -> Option<f64> {
        ratio(self.true_pos, self.true_pos + self.false_pos)
    }

    /// 2TP/(2TP+FN+FP); None when the denominator is zero.
    pub fn f1(&self) -> Option<f64> {
        ratio(2 * self.true_pos, 2 * self.true_pos + self.false_neg + self.false_pos)
    }
}

// ---- ROC / AUC ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub true_positive_rate: f64,
    pub false_positive_rate: f64,
}

/// ROC curve and its area by trapezoidal integration over distinct-score
/// thresholds. Ties are grouped, which makes the result identical to the
/// pair-ranking probability with ties counted 1/2. Needs at least one
/// positive and one negative label.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<(f64, Vec<RocPoint>)> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Data("scores must be finite".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count() as i128;
    let neg = labels.len() as i128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data("ROC needs both classes present".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite").then(a.cmp(&b)));

    let mut curve = Vec::new();
    curve.push(RocPoint {
        threshold: f64::INFINITY,
        true_positive_rate: 0.0,
        false_positive_rate: 0.0,
    });
    let mut tp: i128 = 0;
    let mut fp: i128 = 0;
    let mut area2: i128 = 0; // twice the area, in units of 1/(pos·neg)
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let (tp_prev, fp_prev) = (tp, fp);
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - fp_prev) * (tp_prev + tp);
        curve.push(RocPoint {
            threshold,
            true_positive_rate: tp as f64 / pos as f64,
            false_positive_rate: fp as f64 / neg as f64,
        });
    }
    let auc = area2 as f64 / (2 * pos * neg) as f64;
    Ok((auc, curve))
}

// ---- average precision --------------------------------------------------------

/// One detection for AP evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalDetection {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// One ground-truth box for AP evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalGroundTruth {
    pub image: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    /// None when the class has no ground truth (excluded from mAP).
    pub ap: Option<f64>,
    pub n_ground_truth: usize,
    pub n_detections: usize,
    /// IoUs of the matched true-positive pairs, in rank order.
    pub matched_ious: Vec<f64>,
}

/// Deterministic detection matching order: score descending, then image,
/// then insertion index.
pub(crate) fn rank_order(dets: &[EvalDetection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .expect("finite scores")
            .then(dets[a].image.cmp(&dets[b].image))
            .then(a.cmp(&b))
    });
    order
}

/// Greedy matching: each detection (in rank order) claims the unmatched
/// ground truth of its image with the highest IoU, provided the IoU
/// strictly exceeds the threshold. Returns per-rank hit flags and IoUs.
pub(crate) fn match_detections(
    dets: &[EvalDetection],
    order: &[usize],
    gts: &[EvalGroundTruth],
    iou_threshold: f64,
) -> (Vec<bool>, Vec<f64>) {
    let mut gt_taken = alloc::vec![false; gts.len()];
    let mut hits = Vec::with_capacity(order.len());
    let mut matched_ious = Vec::new();
    for &di in order {
        let d = &dets[di];
        let mut best = iou_threshold;
        let mut best_gt = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt.image != d.image || gt_taken[gi] {
                continue;
            }
            let v = iou(d.bbox, gt.bbox);
            // strict inequality against the threshold; ties between ground
            // truths resolve to the lower index
            if v > best {
                best = v;
                best_gt = Some(gi);
            }
        }
        if let Some(gi) = best_gt {
            gt_taken[gi] = true;
            hits.push(true);
            matched_ious.push(best);
        } else {
            hits.push(false);
        }
    }
    (hits, matched_ious)
}

/// Area under the precision-recall curve with all-point interpolation
/// (precision envelope), computed exactly. Matching requires IoU strictly
/// above `iou_threshold`; each ground truth is claimed at most once, in
/// descending score order.
pub fn average_precision(
    dets: &[EvalDetection],
    gts: &[EvalGroundTruth],
    iou_threshold: f64,
) -> Result<ApResult> {
    if !(0.0 < iou_threshold && iou_threshold < 1.0) {
        return Err(Error::Parameter(format!(
            "iou threshold must lie in (0,1), got {iou_threshold}"
        )));
    }
    if dets.iter().any(|d| !d.score.is_finite()) {
        return Err(Error::Data("detection scores must be finite".into()));
    }
    let n_pos = gts.len();
    if n_pos == 0 {
        return Ok(ApResult {
            ap: None,
            n_ground_truth: 0,
            n_detections: dets.len(),
            matched_ious: Vec::new(),
        });
    }
    let order = rank_order(dets);
    let (hits, matched_ious) = match_detections(dets, &order, gts, iou_threshold);

    // PR points at distinct-score boundaries (a threshold cannot separate
    // tied detections).
    let mut points: Vec<(u64, u64)> = Vec::new();
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut i = 0;
    while i < order.len() {
        let s = dets[order[i]].score;
        while i < order.len() && dets[order[i]].score == s {
            if hits[i] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((tp, fp));
    }

    let ap = exact_envelope_ap(&points, n_pos as u64);
    Ok(ApResult {
        ap: Some(ap.to_f64().expect("rational in [0,1]")),
        n_ground_truth: n_pos,
        n_detections: dets.len(),
        matched_ious,
    })
}

/// Σ over PR points of Δrecall · (suffix-max precision), exact.
pub(crate) fn exact_envelope_ap(points: &[(u64, u64)], n_pos: u64) -> BigRational {
    let mut area = BigRational::zero();
    let mut best = BigRational::zero();
    let mut deltas: Vec<(u64, BigRational)> = Vec::with_capacity(points.len());
    for idx in (0..points.len()).rev() {
        let (tp, fp) = points[idx];
        let precision = BigRational::new(BigInt::from(tp), BigInt::from(tp + fp));
        if precision > best {
            best = precision;
        }
        let tp_before = if idx == 0 { 0 } else { points[idx - 1].0 };
        deltas.push((tp - tp_before, best.clone()));
    }
    for (dtp, envelope) in deltas {
        if dtp > 0 {
            area += BigRational::new(BigInt::from(dtp), BigInt::from(n_pos)) * envelope;
        }
    }
    area
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanApResult {
    /// Unweighted mean over classes that have ground truth.
    pub map: Option<f64>,
    /// Classes excluded because they had no ground truth.
    pub skipped_classes: Vec<String>,
}

/// Unweighted mean of per-class APs; classes without ground truth are
/// excluded and reported.
pub fn mean_ap(per_class: &[(String, ApResult)]) -> MeanApResult {
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut skipped = Vec::new();
    for (name, r) in per_class {
        match r.ap {
            Some(ap) => {
                sum += ap;
                count += 1;
            }
            None => skipped.push(name.clone()),
        }
    }
    MeanApResult {
        map: (count > 0).then(|| sum / count as f64),
        skipped_classes: skipped,
    }
}

// ---- order statistics -----------------------------------------------------------

/// Five-number summary of an IoU sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxplotStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub count: usize,
}

/// Quartiles by linear interpolation between closest ranks
/// (h = (n−1)p; box-plot conventions vary, this one is pinned by tests).
pub fn iou_quartiles(ious: &[f64]) -> Result<BoxplotStats> {
    if ious.is_empty() {
        return Err(Error::Data("quartiles of an empty sample".into()));
    }
    if ious.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("sample values must be finite".into()));
    }
    let mut sorted = ious.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let quantile = |p: f64| -> f64 {
        let h = (sorted.len() - 1) as f64 * p;
        let lo = h as usize;
        let frac = h - lo as f64;
        if lo + 1 < sorted.len() {
            sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
        } else {
            sorted[lo]
        }
    };
    Ok(BoxplotStats {
        min: sorted[0],
        q1: quantile(0.25),
        median: quantile(0.5),
        q3: quantile(0.75),
        max: sorted[sorted.len() - 1],
        count: sorted.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn confusion_all_correct_positives() {
        let c = confusion(&[true; 5], &[true; 5]).unwrap();
        assert_eq!(c, ConfusionCounts { true_pos: 5, ..Default::default() });
    }

    #[test]
    fn confusion_inverted_predictions() {
        let c = confusion(&[true, false, true], &[false, true, false]).unwrap();
        assert_eq!(c.true_pos, 0);
        assert_eq!(c.true_neg, 0);
        assert_eq!(c.false_pos, 2);
        assert_eq!(c.false_neg, 1);
    }

    #[test]
    fn confusion_hand_fixture_9_1_1_9() {
        let mut pred = vec![true; 10];
        pred.extend(vec![false; 10]);
        let mut truth = vec![true; 9];
        truth.push(false); // false positive
        truth.push(true); // false negative
        truth.extend(vec![false; 9]);
        let c = confusion(&pred, &truth).unwrap();
        assert_eq!(
            c,
            ConfusionCounts { true_pos: 9, false_pos: 1, false_neg: 1, true_neg: 9 }
        );
        for m in [c.accuracy(), c.specificity(), c.sensitivity(), c.precision(), c.f1()] {
            assert_eq!(m, Some(0.9));
        }
    }

    #[test]
    fn balanced_counts_give_half() {
        let c = ConfusionCounts { true_pos: 5, false_pos: 5, false_neg: 5, true_neg: 5 };
        assert_eq!(c.accuracy(), Some(0.5));
        assert_eq!(c.f1(), Some(0.5));
    }

    #[test]
    fn perfect_classifier_is_all_ones() {
        let c = ConfusionCounts { true_pos: 7, true_neg: 3, ..Default::default() };
        for m in [c.accuracy(), c.specificity(), c.sensitivity(), c.precision(), c.f1()] {
            assert_eq!(m, Some(1.0));
        }
    }

    #[test]
    fn undefined_metrics_are_none_not_zero() {
        let c = ConfusionCounts { true_neg: 4, ..Default::default() };
        assert_eq!(c.sensitivity(), None);
        assert_eq!(c.precision(), None);
        assert_eq!(c.specificity(), Some(1.0));
    }

    #[test]
    fn auc_perfectly_separated() {
        let (auc, _) = roc_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(auc, 1.0);
    }

    #[test]
    fn auc_all_ties_is_half() {
        let (auc, _) = roc_auc(&[0.5; 6], &[true, false, true, false, true, false]).unwrap();
        assert_eq!(auc, 0.5);
    }

    #[test]
    fn auc_hand_case() {
        // pairs: (0.9 > 0.4) and (0.6 > 0.4) → 1.0
        let (auc, _) = roc_auc(&[0.9, 0.4, 0.6], &[true, false, true]).unwrap();
        assert_eq!(auc, 1.0);
    }

    #[test]
    fn auc_single_class_is_error() {
        assert!(roc_auc(&[0.1, 0.9], &[true, true]).is_err());
    }

    #[test]
    fn ap_single_perfect_detection() {
        let gt = [EvalGroundTruth { image: 0, bbox: bx(0.0, 0.0, 10.0, 10.0) }];
        let det = [EvalDetection { image: 0, bbox: bx(0.0, 0.0, 10.0, 10.0), score: 0.9 }];
        let r = average_precision(&det, &gt, 0.5).unwrap();
        assert_eq!(r.ap, Some(1.0));
        assert_eq!(r.matched_ious, vec![1.0]);
    }

    #[test]
    fn ap_disjoint_detection_is_zero() {
        let gt = [EvalGroundTruth { image: 0, bbox: bx(0.0, 0.0, 10.0, 10.0) }];
        let det = [EvalDetection { image: 0, bbox: bx(50.0, 50.0, 60.0, 60.0), score: 0.9 }];
        let r = average_precision(&det, &gt, 0.5).unwrap();
        assert_eq!(r.ap, Some(0.0));
    }

    #[test]
    fn ap_hand_trace_two_gt_three_dets() {
        // hits at ranks 1 and 3, miss at rank 2 → 1·0.5 + (2/3)·0.5 = 5/6
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let g2 = bx(100.0, 100.0, 110.0, 110.0);
        let gts = [
            EvalGroundTruth { image: 0, bbox: g },
            EvalGroundTruth { image: 0, bbox: g2 },
        ];
        let dets = [
            EvalDetection { image: 0, bbox: g, score: 0.9 },
            EvalDetection { image: 0, bbox: bx(40.0, 40.0, 50.0, 50.0), score: 0.8 },
            EvalDetection { image: 0, bbox: g2, score: 0.7 },
        ];
        let r = average_precision(&dets, &gts, 0.5).unwrap();
        let expected = BigRational::new(BigInt::from(5), BigInt::from(6)).to_f64().unwrap();
        assert_eq!(r.ap, Some(expected));
        assert!((r.ap.unwrap() - 0.8333333333333333).abs() < 1e-12);
    }

    #[test]
    fn ap_without_ground_truth_is_excluded() {
        let dets = [EvalDetection { image: 0, bbox: bx(0.0, 0.0, 1.0, 1.0), score: 0.5 }];
        let r = average_precision(&dets, &[], 0.5).unwrap();
        assert_eq!(r.ap, None);
        let m = mean_ap(&[("empty".to_string(), r)]);
        assert_eq!(m.map, None);
        assert_eq!(m.skipped_classes, vec!["empty".to_string()]);
    }

    #[test]
    fn quartiles_constant_sample() {
        let s = iou_quartiles(&[0.7; 9]).unwrap();
        assert_eq!((s.min, s.q1, s.median, s.q3, s.max), (0.7, 0.7, 0.7, 0.7, 0.7));
    }

    #[test]
    fn quartiles_symmetric_sample() {
        let s = iou_quartiles(&[0.0, 0.25, 0.5, 0.75, 1.0]).unwrap();
        assert_eq!(s.median, 0.5);
    }

    #[test]
    fn quartiles_linear_interpolation_rule() {
        let s = iou_quartiles(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.q1, 1.75);
        assert_eq!(s.q3, 3.25);
    }

    #[test]
    fn quartiles_empty_is_error() {
        assert!(iou_quartiles(&[]).is_err());
    }

    #[test]
    fn f1_is_harmonic_mean_where_defined() {
        let c = ConfusionCounts { true_pos: 7, false_pos: 3, false_neg: 2, true_neg: 8 };
        let p = c.precision().unwrap();
        let s = c.sensitivity().unwrap();
        let harmonic = 2.0 * p * s / (p + s);
        assert!((c.f1().unwrap() - harmonic).abs() < 1e-12);
    }
}
