//! Evaluation harness: detection AP/mAP, IoU quartiles, quality-flag
//! classification metrics, ROC/AUC and plane-verdict accuracy, per section
//! and pooled.
//!
//! Detection metrics score the model's detections against ground truth at
//! IoU > 0.5. Quality-flag metrics isolate the classifier: every annotated
//! (present) structure's ground-truth box is pushed through the pipeline
//! and the quality head's probability is compared with the labelled flag.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::anatomy::{section_structures, Section, SECTIONS, STRUCTURES};
use crate::detector::BBox;
use crate::error::{Error, Result};
use crate::metrics::{
    average_precision, confusion, iou_quartiles, mean_ap, roc_auc, ApResult, BoxplotStats,
    ConfusionCounts, EvalDetection, EvalGroundTruth,
};
use crate::model::Model;
use crate::phantom::{Annotation, PhantomSample};
use crate::preprocess::GrayImage;
use crate::real::Real;
use crate::report::{reduce_detections, run_pipeline, PlaneVerdict};

/// One evaluation image with ground truth (raw image; the pipeline applies
/// its own preprocessing).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub image: GrayImage,
    pub section: Section,
    pub annotations: Vec<Annotation>,
    pub plane_standard: bool,
}

impl From<&PhantomSample> for EvalSample {
    fn from(s: &PhantomSample) -> Self {
        EvalSample {
            image: s.image.clone(),
            section: s.section,
            annotations: s.annotations.clone(),
            plane_standard: s.plane_standard,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: String,
    pub ap: Option<f64>,
    pub n_ground_truth: usize,
    pub n_detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityMetrics {
    pub counts: ConfusionCounts,
    pub accuracy: Option<f64>,
    pub specificity: Option<f64>,
    pub sensitivity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    /// None when only one flag class occurs in the ground truth.
    pub auc: Option<f64>,
}

fn quality_metrics(probs: &[f64], truths: &[bool], cutoff: f64) -> Result<Option<QualityMetrics>> {
    if probs.is_empty() {
        return Ok(None);
    }
    let preds: Vec<bool> = probs.iter().map(|&p| p >= cutoff).collect();
    let counts = confusion(&preds, truths)?;
    let auc = if truths.iter().any(|&t| t) && truths.iter().any(|&t| !t) {
        Some(roc_auc(probs, truths)?.0)
    } else {
        None
    };
    Ok(Some(QualityMetrics {
        counts,
        accuracy: counts.accuracy(),
        specificity: counts.specificity(),
        sensitivity: counts.sensitivity(),
        precision: counts.precision(),
        f1: counts.f1(),
        auc,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionMetrics {
    pub section: Section,
    pub n_images: usize,
    pub map: Option<f64>,
    pub per_class_ap: Vec<ClassAp>,
    pub skipped_classes: Vec<String>,
    pub iou_stats: Option<BoxplotStats>,
    pub quality: Option<QualityMetrics>,
    pub verdict_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallMetrics {
    pub n_images: usize,
    /// Unweighted mean AP over all classes with ground truth.
    pub map: Option<f64>,
    pub iou_stats: Option<BoxplotStats>,
    pub quality: Option<QualityMetrics>,
    pub verdict_accuracy: Option<f64>,
}

/// The eval surface serialized to metrics JSON. `timing_s` is measured by
/// the caller and kept out of the deterministic payload (None here).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub version: u32,
    pub sections: Vec<SectionMetrics>,
    pub overall: OverallMetrics,
    pub timing_s: Option<f64>,
}

struct ClassPool {
    dets: Vec<EvalDetection>,
    gts: Vec<EvalGroundTruth>,
}

/// Evaluate a model over labelled samples.
pub fn evaluate<T: Real>(model: &Model<T>, samples: &[EvalSample]) -> Result<MetricSummary> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation needs at least one sample".into()));
    }
    let n_classes = STRUCTURES.len();
    let mut pools: Vec<ClassPool> = (0..n_classes)
        .map(|_| ClassPool { dets: Vec::new(), gts: Vec::new() })
        .collect();
    let mut verdict_ok: Vec<(Section, bool)> = Vec::new();
    let mut quality_probs: Vec<(Section, f64, bool)> = Vec::new();

    for (image_idx, sample) in samples.iter().enumerate() {
        let gt_boxes: Vec<BBox> = sample.annotations.iter().map(|a| a.bbox).collect();
        let out = run_pipeline(model, &sample.image, &gt_boxes)?;

        let section_ids: Vec<usize> =
            section_structures(sample.section).iter().map(|s| s.id).collect();
        for det in &out.detections {
            if section_ids.contains(&det.class_id) {
                pools[det.class_id].dets.push(EvalDetection {
                    image: image_idx,
                    bbox: det.bbox,
                    score: det.score,
                });
            }
        }
        for ann in &sample.annotations {
            pools[ann.class_id]
                .gts
                .push(EvalGroundTruth { image: image_idx, bbox: ann.bbox });
        }

        let (_, verdict) =
            reduce_detections(&model.config.assess, sample.section, &out.detections);
        let predicted_standard = verdict == PlaneVerdict::Standard;
        verdict_ok.push((sample.section, predicted_standard == sample.plane_standard));

        for (ann, pred) in sample.annotations.iter().zip(&out.roi_predictions) {
            quality_probs.push((sample.section, pred.quality, ann.flag == 1));
        }
    }

    let ap_results: Vec<ApResult> = pools
        .iter()
        .map(|p| average_precision(&p.dets, &p.gts, 0.5))
        .collect::<Result<_>>()?;

    let cutoff = model.config.assess.quality_cutoff;
    let mut sections = Vec::new();
    for section in SECTIONS {
        let ids: Vec<usize> = section_structures(section).iter().map(|s| s.id).collect();
        let n_images = samples.iter().filter(|s| s.section == section).count();
        if n_images == 0 {
            continue;
        }
        let named: Vec<(String, ApResult)> = ids
            .iter()
            .map(|&id| (String::from(STRUCTURES[id].abbrev), ap_results[id].clone()))
            .collect();
        let m = mean_ap(&named);
        let per_class_ap = named
            .iter()
            .map(|(class, r)| ClassAp {
                class: class.clone(),
                ap: r.ap,
                n_ground_truth: r.n_ground_truth,
                n_detections: r.n_detections,
            })
            .collect();
        let ious: Vec<f64> =
            ids.iter().flat_map(|&id| ap_results[id].matched_ious.iter().copied()).collect();
        let probs: Vec<f64> = quality_probs
            .iter()
            .filter(|(s, _, _)| *s == section)
            .map(|(_, p, _)| *p)
            .collect();
        let truths: Vec<bool> = quality_probs
            .iter()
            .filter(|(s, _, _)| *s == section)
            .map(|(_, _, t)| *t)
            .collect();
        let verdicts: Vec<bool> = verdict_ok
            .iter()
            .filter(|(s, _)| *s == section)
            .map(|(_, ok)| *ok)
            .collect();
        sections.push(SectionMetrics {
            section,
            n_images,
            map: m.map,
            per_class_ap,
            skipped_classes: m.skipped_classes,
            iou_stats: (!ious.is_empty()).then(|| iou_quartiles(&ious)).transpose()?,
            quality: quality_metrics(&probs, &truths, cutoff)?,
            verdict_accuracy: (!verdicts.is_empty())
                .then(|| verdicts.iter().filter(|&&v| v).count() as f64 / verdicts.len() as f64),
        });
    }

    let named_all: Vec<(String, ApResult)> = (0..n_classes)
        .map(|id| (String::from(STRUCTURES[id].abbrev), ap_results[id].clone()))
        .collect();
    let overall_map = mean_ap(&named_all);
    let all_ious: Vec<f64> =
        ap_results.iter().flat_map(|r| r.matched_ious.iter().copied()).collect();
    let all_probs: Vec<f64> = quality_probs.iter().map(|(_, p, _)| *p).collect();
    let all_truths: Vec<bool> = quality_probs.iter().map(|(_, _, t)| *t).collect();
    let overall = OverallMetrics {
        n_images: samples.len(),
        map: overall_map.map,
        iou_stats: (!all_ious.is_empty()).then(|| iou_quartiles(&all_ious)).transpose()?,
        quality: quality_metrics(&all_probs, &all_truths, cutoff)?,
        verdict_accuracy: Some(
            verdict_ok.iter().filter(|(_, ok)| *ok).count() as f64 / verdict_ok.len() as f64,
        ),
    };

    Ok(MetricSummary { version: 1, sections, overall, timing_s: None })
}
