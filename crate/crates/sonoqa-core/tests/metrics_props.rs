//! Metric invariants and oracle agreement.

use proptest::prelude::*;
use sonoqa_core::metrics::{
    average_precision, confusion, iou_quartiles, oracle, roc_auc, ConfusionCounts,
};
use sonoqa_core::selfcheck;

#[test]
fn ap_and_auc_match_oracles_on_500_instances() {
    let outcome = selfcheck::metrics_oracle_check(2024, 500).unwrap();
    assert!(outcome.passed, "{}", outcome.detail);
}

#[test]
fn injected_wrong_interpolation_is_rejected_by_the_oracle() {
    use sonoqa_core::detector::BBox;
    use sonoqa_core::metrics::{EvalDetection, EvalGroundTruth};
    let b = |x: f64| BBox::new(x, 0.0, x + 10.0, 10.0).unwrap();
    let gts = [
        EvalGroundTruth { image: 0, bbox: b(0.0) },
        EvalGroundTruth { image: 0, bbox: b(100.0) },
    ];
    let dets = [
        EvalDetection { image: 0, bbox: b(0.0), score: 0.9 },
        EvalDetection { image: 0, bbox: b(50.0), score: 0.8 },
    ];
    let right = oracle::ap_by_threshold_enumeration(&dets, &gts, 0.5).unwrap().unwrap();
    let wrong = oracle::ap_eleven_point(&dets, &gts, 0.5).unwrap().unwrap();
    assert!((right - wrong).abs() > 1e-3, "fixture no longer separates the protocols");
    let implemented = average_precision(&dets, &gts, 0.5).unwrap().ap.unwrap();
    assert_eq!(implemented, right);
    assert_ne!(implemented, wrong);
}

proptest! {
    #[test]
    fn adding_a_true_positive_never_hurts(
        tp in 0u64..40, fp in 0u64..40, fn_ in 0u64..40, tn in 0u64..40,
    ) {
        let before = ConfusionCounts { true_pos: tp, false_pos: fp, false_neg: fn_, true_neg: tn };
        let after = ConfusionCounts { true_pos: tp + 1, ..before };
        for (b, a) in [
            (before.accuracy(), after.accuracy()),
            (before.sensitivity(), after.sensitivity()),
            (before.precision(), after.precision()),
            (before.f1(), after.f1()),
        ] {
            if let (Some(b), Some(a)) = (b, a) {
                prop_assert!(a >= b - 1e-12);
            }
        }
    }

    #[test]
    fn quartiles_are_ordered(sample in proptest::collection::vec(0.0f64..=1.0, 1..50)) {
        let s = iou_quartiles(&sample).unwrap();
        prop_assert!(s.min <= s.q1 && s.q1 <= s.median && s.median <= s.q3 && s.q3 <= s.max);
    }

    #[test]
    fn confusion_counts_are_exhaustive(
        pred in proptest::collection::vec(any::<bool>(), 0..60),
    ) {
        let truth: Vec<bool> = pred.iter().map(|p| !p).collect();
        let c = confusion(&pred, &truth).unwrap();
        prop_assert_eq!(c.total() as usize, pred.len());
    }

    #[test]
    fn auc_of_inverted_scores_complements(
        scores in proptest::collection::vec(0.0f64..1.0, 4..40),
    ) {
        let labels: Vec<bool> = scores.iter().enumerate().map(|(i, _)| i % 2 == 0).collect();
        let (auc, _) = roc_auc(&scores, &labels).unwrap();
        let flipped: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
        let (auc_f, _) = roc_auc(&flipped, &labels).unwrap();
        prop_assert!((auc + auc_f - 1.0).abs() < 1e-12);
    }
}
