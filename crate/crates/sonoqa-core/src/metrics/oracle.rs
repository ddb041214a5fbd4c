//! Independent brute-force reference implementations.
//!
//! These deliberately re-derive AP and AUC by the slowest possible route:
//! AP re-runs the matching from scratch at every score threshold and
//! integrates the precision envelope with an explicit O(k²) suffix
//! maximum; AUC counts every positive/negative pair. The self-check
//! command and the test suite hold the fast implementations equal to these
//! (bit-for-bit — both sides reduce to the same exact rational).

use alloc::vec::Vec;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::metrics::{match_detections, rank_order, EvalDetection, EvalGroundTruth};

/// AP by threshold enumeration: for every distinct score t (descending),
/// keep detections with score ≥ t, match them from scratch, and record the
/// (tp, fp) cut. The envelope precision at each cut is an explicit maximum
/// over all not-lower-recall cuts.
pub fn ap_by_threshold_enumeration(
    dets: &[EvalDetection],
    gts: &[EvalGroundTruth],
    iou_threshold: f64,
) -> Result<Option<f64>> {
    if gts.is_empty() {
        return Ok(None);
    }
    let order = rank_order(dets);
    let mut thresholds: Vec<f64> = order.iter().map(|&i| dets[i].score).collect();
    thresholds.dedup();

    let mut cuts: Vec<(u64, u64)> = Vec::new();
    for &t in &thresholds {
        let subset: Vec<EvalDetection> =
            dets.iter().copied().filter(|d| d.score >= t).collect();
        let sub_order = rank_order(&subset);
        let (hits, _) = match_detections(&subset, &sub_order, gts, iou_threshold);
        let tp = hits.iter().filter(|&&h| h).count() as u64;
        let fp = hits.len() as u64 - tp;
        cuts.push((tp, fp));
    }

    let n_pos = gts.len() as u64;
    let mut area = BigRational::zero();
    for (idx, &(tp, fp)) in cuts.iter().enumerate() {
        let tp_before = if idx == 0 { 0 } else { cuts[idx - 1].0 };
        if tp == tp_before {
            continue;
        }
        // envelope: best precision among cuts with recall ≥ this one
        let mut envelope = BigRational::new(BigInt::from(tp), BigInt::from(tp + fp));
        for &(tp2, fp2) in &cuts[idx + 1..] {
            let p2 = BigRational::new(BigInt::from(tp2), BigInt::from(tp2 + fp2));
            if p2 > envelope {
                envelope = p2;
            }
        }
        area += BigRational::new(BigInt::from(tp - tp_before), BigInt::from(n_pos)) * envelope;
    }
    Ok(Some(area.to_f64().expect("rational in [0,1]")))
}

/// AUC as the Mann-Whitney statistic: the fraction of (positive, negative)
/// pairs ranked correctly, ties counted 1/2. O(n²).
pub fn auc_by_pair_counting(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter_map(|(&s, &l)| l.then_some(s))
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter_map(|(&s, &l)| (!l).then_some(s))
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Data("pair counting needs both classes".into()));
    }
    let mut wins: i128 = 0;
    let mut ties: i128 = 0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1;
            } else if p == n {
                ties += 1;
            }
        }
    }
    // identical final division to the trapezoid route
    Ok((2 * wins + ties) as f64 / (2 * pos.len() as i128 * neg.len() as i128) as f64)
}

/// AP with the (wrong for this artifact) 11-point interpolation. Exists so
/// tests can demonstrate that the oracle rejects a protocol mismatch.
pub fn ap_eleven_point(
    dets: &[EvalDetection],
    gts: &[EvalGroundTruth],
    iou_threshold: f64,
) -> Result<Option<f64>> {
    if gts.is_empty() {
        return Ok(None);
    }
    let order = rank_order(dets);
    let (hits, _) = match_detections(dets, &order, gts, iou_threshold);
    let mut pr: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    for h in hits {
        if h {
            tp += 1;
        } else {
            fp += 1;
        }
        pr.push((tp as f64 / gts.len() as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut total = 0.0;
    for k in 0..=10 {
        let r = k as f64 / 10.0;
        let best = pr
            .iter()
            .filter(|(recall, _)| *recall >= r)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        total += best;
    }
    Ok(Some(total / 11.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::BBox;
    use crate::metrics::average_precision;

    fn det(image: usize, x: f64, score: f64) -> EvalDetection {
        EvalDetection {
            image,
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0).unwrap(),
            score,
        }
    }

    fn gt(image: usize, x: f64) -> EvalGroundTruth {
        EvalGroundTruth { image, bbox: BBox::new(x, 0.0, x + 10.0, 10.0).unwrap() }
    }

    #[test]
    fn oracle_agrees_on_hand_trace() {
        let gts = [gt(0, 0.0), gt(0, 100.0)];
        let dets = [det(0, 0.0, 0.9), det(0, 50.0, 0.8), det(0, 100.0, 0.7)];
        let fast = average_precision(&dets, &gts, 0.5).unwrap().ap;
        let slow = ap_by_threshold_enumeration(&dets, &gts, 0.5).unwrap();
        assert_eq!(fast, slow);
    }

    #[test]
    fn eleven_point_differs_on_fixture() {
        // Hit at rank 1, miss at rank 2, one of two ground truths found:
        // all-point AP = 0.5 but 11-point = 6/11 ≈ 0.545.
        let gts = [gt(0, 0.0), gt(0, 100.0)];
        let dets = [det(0, 0.0, 0.9), det(0, 50.0, 0.8)];
        let exact = ap_by_threshold_enumeration(&dets, &gts, 0.5).unwrap().unwrap();
        let eleven = ap_eleven_point(&dets, &gts, 0.5).unwrap().unwrap();
        assert!((exact - 0.5).abs() < 1e-12);
        assert!((eleven - 6.0 / 11.0).abs() < 1e-12);
        assert!((exact - eleven).abs() > 1e-3);
    }
}
