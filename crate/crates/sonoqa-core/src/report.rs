//! Quality-verdict engine: detections → per-structure '1'/'0' → plane verdict.
//!
//! The assessment pipeline is preprocess → feature extraction → pyramid →
//! proposals → per-ROI relation-fused classification. For each essential
//! structure of the section the highest-confidence detection is kept; its
//! quality-head probability at the configured cutoff yields the binary
//! flag, and the plane is standard exactly when every essential structure
//! is detected with flag 1.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::anatomy::{section_structures, structure, Section, BACKGROUND_CLASS};
use crate::backbone;
use crate::classifier::{classify_batch, roi_features, ClassPrediction};
use crate::detector::{fpn_forward, nms, propose, rpn_forward, BBox};
use crate::error::{Error, Result};
use crate::model::{prepare_image, Model};
use crate::preprocess::GrayImage;
use crate::real::Real;
use crate::relation::{self, RoiGeometry};
use crate::tensor::Tape;

/// One classified detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    /// Detection confidence: class softmax probability × proposal
    /// objectness (the proposal head is trained that clutter is
    /// background, so the product suppresses look-alikes).
    pub score: f64,
    /// Quality-head probability that the structure meets the standard.
    pub quality: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlaneVerdict {
    Standard,
    NonStandard,
}

impl PlaneVerdict {
    pub fn as_str(self) -> &'static str {
        match self {
            PlaneVerdict::Standard => "standard",
            PlaneVerdict::NonStandard => "non-standard",
        }
    }
}

/// Assessment of one essential structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureAssessment {
    pub id: String,
    pub name: String,
    pub detected: bool,
    /// Box of the best detection, when detected.
    #[serde(rename = "box")]
    pub bbox: Option<[f64; 4]>,
    /// 1 iff detected and the quality head clears the cutoff.
    pub flag: u8,
    pub confidence: f64,
    pub quality_prob: f64,
}

/// Versioned per-plane report (the JSON surface of `assess`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub version: u32,
    pub section: Section,
    pub structures: Vec<StructureAssessment>,
    pub verdict: PlaneVerdict,
    /// Wall-clock seconds; measured by the caller (the core is clock-free).
    pub timing_s: f64,
}

/// Everything one forward pass produces.
pub struct PipelineOutput {
    pub detections: Vec<Detection>,
    /// Predictions for caller-supplied ROIs (classified as their own
    /// relation group, mirroring how ground-truth ROIs are trained).
    pub roi_predictions: Vec<ClassPrediction>,
}

/// Run the full pipeline once: preprocess, extract, propose, classify.
/// `extra_rois` lets callers score known boxes (e.g. ground truth) in the
/// same pass.
pub fn run_pipeline<T: Real>(
    model: &Model<T>,
    image: &GrayImage,
    extra_rois: &[BBox],
) -> Result<PipelineOutput> {
    let prepared = prepare_image(&model.config.preprocess, image)?;
    let (w, h) = (prepared.width(), prepared.height());
    let g: Tape<T> = Tape::new();
    let tensors = model.stage(&g, false)?;
    let input = backbone::image_tensor(&g, &prepared)?;
    let maps = backbone::extract(&g, &tensors.fen, input)?;
    let pyramids = fpn_forward(&g, &tensors.fpn, maps[2], maps[3], maps[4])?;
    let heads = rpn_forward(&g, &tensors.rpn, &pyramids)?;
    let proposals = propose(&g, &heads, &model.config.fpn, w, h)?;

    let classify_group = |rois: &[BBox]| -> Result<Vec<ClassPrediction>> {
        if rois.is_empty() {
            return Ok(Vec::new());
        }
        let feats = roi_features(
            &g,
            &tensors.cpn,
            &model.config.cpn,
            &pyramids,
            &model.config.fpn,
            rois,
            w,
            h,
        )?;
        let geoms: Vec<RoiGeometry> = rois.iter().map(|b| RoiGeometry::from_bbox(*b)).collect();
        let fused =
            relation::fuse(&g, &tensors.cpn.relation, feats, &geoms, &model.config.relation)?;
        let (class_logits, quality_logits) = classify_batch(&g, &tensors.cpn, fused)?;
        let probs = g.values(g.softmax(class_logits, 1)?);
        let quality = g.values(g.sigmoid(quality_logits)?);
        let n_classes = crate::anatomy::NUM_CLASSES;
        Ok((0..rois.len())
            .map(|i| ClassPrediction {
                class_probs: probs[i * n_classes..(i + 1) * n_classes]
                    .iter()
                    .map(|v| v.to_f64())
                    .collect(),
                quality: quality[i].to_f64(),
            })
            .collect())
    };

    let proposal_boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
    let proposal_preds = classify_group(&proposal_boxes)?;
    let mut detections: Vec<Detection> = Vec::new();
    for (proposal, pred) in proposals.iter().zip(&proposal_preds) {
        let class_id = pred.best_class();
        if class_id == BACKGROUND_CLASS {
            continue;
        }
        detections.push(Detection {
            bbox: proposal.bbox,
            class_id,
            score: pred.class_probs[class_id] * proposal.score,
            quality: pred.quality,
        });
    }
    // class-wise suppression of duplicate detections
    let mut kept: Vec<Detection> = Vec::new();
    for class_id in 0..BACKGROUND_CLASS {
        let of_class: Vec<&Detection> =
            detections.iter().filter(|d| d.class_id == class_id).collect();
        if of_class.is_empty() {
            continue;
        }
        let candidates: Vec<(BBox, f64)> = of_class.iter().map(|d| (d.bbox, d.score)).collect();
        for i in nms(&candidates, model.config.fpn.nms_iou) {
            kept.push(*of_class[i]);
        }
    }
    kept.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite scores")
            .then(a.class_id.cmp(&b.class_id))
    });

    let roi_predictions = classify_group(extra_rois)?;
    Ok(PipelineOutput { detections: kept, roi_predictions })
}

/// Detections only (see [`run_pipeline`]).
pub fn detect<T: Real>(model: &Model<T>, image: &GrayImage) -> Result<Vec<Detection>> {
    Ok(run_pipeline(model, image, &[])?.detections)
}

/// Reduce detections to per-structure assessments and the plane verdict.
pub fn reduce_detections(
    model_assess: &crate::model::AssessConfig,
    section: Section,
    detections: &[Detection],
) -> (Vec<StructureAssessment>, PlaneVerdict) {
    let mut structures = Vec::new();
    let mut all_ok = true;
    for def in section_structures(section) {
        let best = detections
            .iter()
            .filter(|d| d.class_id == def.id && d.score >= model_assess.min_confidence)
            .max_by(|a, b| a.score.partial_cmp(&b.score).expect("finite scores"));
        let assessment = match best {
            Some(d) => {
                let flag = u8::from(d.quality >= model_assess.quality_cutoff);
                StructureAssessment {
                    id: def.abbrev.into(),
                    name: def.name.into(),
                    detected: true,
                    bbox: Some([d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max]),
                    flag,
                    confidence: d.score,
                    quality_prob: d.quality,
                }
            }
            None => StructureAssessment {
                id: def.abbrev.into(),
                name: def.name.into(),
                detected: false,
                bbox: None,
                flag: 0,
                confidence: 0.0,
                quality_prob: 0.0,
            },
        };
        all_ok &= assessment.detected && assessment.flag == 1;
        structures.push(assessment);
    }
    let verdict = if all_ok { PlaneVerdict::Standard } else { PlaneVerdict::NonStandard };
    (structures, verdict)
}

/// Assess one image: detect, reduce per structure, render the verdict.
/// `timing_s` is left at 0 for the caller to fill with wall-clock time.
pub fn assess<T: Real>(
    model: &Model<T>,
    image: &GrayImage,
    section: Section,
) -> Result<QualityReport> {
    let detections = detect(model, image)?;
    let (structures, verdict) = reduce_detections(&model.config.assess, section, &detections);
    Ok(QualityReport { version: 1, section, structures, verdict, timing_s: 0.0 })
}

/// Plane verdict from per-structure outcomes: the conjunction over the
/// section's registry. Every registry structure must be covered and no
/// foreign ids admitted.
pub fn verdict(flags: &[(usize, bool)], section: Section) -> Result<PlaneVerdict> {
    let registry = section_structures(section);
    for (id, _) in flags {
        structure(*id)?;
        if !registry.iter().any(|s| s.id == *id) {
            return Err(Error::Input(format!(
                "structure {} does not belong to the {section} section",
                crate::anatomy::abbrev_of(*id)
            )));
        }
    }
    for def in &registry {
        if !flags.iter().any(|(id, _)| *id == def.id) {
            return Err(Error::Input(format!("missing flag for {}", def.abbrev)));
        }
    }
    Ok(if flags.iter().all(|(_, ok)| *ok) {
        PlaneVerdict::Standard
    } else {
        PlaneVerdict::NonStandard
    })
}

// ---- annotation rendering ----------------------------------------------------

/// 3×5 glyphs for the characters used by structure labels.
fn glyph(c: char) -> [u8; 5] {
    match c {
        'A' => [0b010, 0b101, 0b111, 0b101, 0b101],
        'B' => [0b110, 0b101, 0b110, 0b101, 0b110],
        'C' => [0b011, 0b100, 0b100, 0b100, 0b011],
        'D' => [0b110, 0b101, 0b101, 0b101, 0b110],
        'L' => [0b100, 0b100, 0b100, 0b100, 0b111],
        'M' => [0b101, 0b111, 0b111, 0b101, 0b101],
        'O' => [0b010, 0b101, 0b101, 0b101, 0b010],
        'P' => [0b110, 0b101, 0b110, 0b100, 0b100],
        'R' => [0b110, 0b101, 0b110, 0b110, 0b101],
        'S' => [0b011, 0b100, 0b010, 0b001, 0b110],
        'T' => [0b111, 0b010, 0b010, 0b010, 0b010],
        'U' => [0b101, 0b101, 0b101, 0b101, 0b111],
        'V' => [0b101, 0b101, 0b101, 0b101, 0b010],
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        _ => [0b111, 0b111, 0b111, 0b111, 0b111],
    }
}

fn draw_text(img: &mut GrayImage, x: usize, y: usize, text: &str, v: f64) {
    let mut cx = x;
    for c in text.chars() {
        let rows = glyph(c);
        for (dy, bits) in rows.iter().enumerate() {
            for dx in 0..3 {
                if bits & (0b100 >> dx) != 0 {
                    let (px, py) = (cx + dx, y + dy);
                    if px < img.width() && py < img.height() {
                        img.set(px, py, v);
                    }
                }
            }
        }
        cx += 4;
        if cx + 3 >= img.width() {
            break;
        }
    }
}

fn draw_rect(img: &mut GrayImage, bbox: &[f64; 4], v: f64) {
    let w = img.width() as f64;
    let h = img.height() as f64;
    let x0 = bbox[0].clamp(0.0, w - 1.0) as usize;
    let y0 = bbox[1].clamp(0.0, h - 1.0) as usize;
    let x1 = (bbox[2].clamp(1.0, w) as usize).max(x0 + 1) - 1;
    let y1 = (bbox[3].clamp(1.0, h) as usize).max(y0 + 1) - 1;
    for x in x0..=x1 {
        img.set(x, y0, v);
        img.set(x, y1, v);
    }
    for y in y0..=y1 {
        img.set(x0, y, v);
        img.set(x1, y, v);
    }
}

/// Banner height of annotated images.
pub const BANNER_ROWS: usize = 3;

/// Draw detection boxes, per-structure "ABBREV flag" markers and a verdict
/// banner (bright = standard, dim = non-standard). Output dimensions equal
/// the input's; the drawing is deterministic.
pub fn annotate(image: &GrayImage, report: &QualityReport) -> GrayImage {
    let mut out = image.clone();
    let banner = match report.verdict {
        PlaneVerdict::Standard => 0.9,
        PlaneVerdict::NonStandard => 0.35,
    };
    for y in 0..BANNER_ROWS.min(out.height()) {
        for x in 0..out.width() {
            out.set(x, y, banner);
        }
    }
    for s in &report.structures {
        let Some(bbox) = s.bbox else { continue };
        draw_rect(&mut out, &bbox, 1.0);
        let label = format!("{} {}", s.id, s.flag);
        let ty = if bbox[1] >= 7.0 { bbox[1] as usize - 6 } else { (bbox[3] as usize + 2).min(out.height().saturating_sub(6)) };
        draw_text(&mut out, bbox[0] as usize, ty, &label, 1.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn head_flags(ok: &[bool]) -> Vec<(usize, bool)> {
        section_structures(Section::Head)
            .iter()
            .zip(ok)
            .map(|(s, &b)| (s.id, b))
            .collect()
    }

    #[test]
    fn verdict_is_conjunction() {
        let all = head_flags(&[true; 6]);
        assert_eq!(verdict(&all, Section::Head).unwrap(), PlaneVerdict::Standard);
        let mut one_bad = [true; 6];
        one_bad[3] = false; // brain midline missing
        assert_eq!(
            verdict(&head_flags(&one_bad), Section::Head).unwrap(),
            PlaneVerdict::NonStandard
        );
    }

    #[test]
    fn verdict_is_monotone_in_flags() {
        // flipping any 0→1 never turns standard into non-standard
        for bad in 0..6 {
            let mut flags = [true; 6];
            flags[bad] = false;
            let v0 = verdict(&head_flags(&flags), Section::Head).unwrap();
            flags[bad] = true;
            let v1 = verdict(&head_flags(&flags), Section::Head).unwrap();
            assert!(!(v0 == PlaneVerdict::Standard && v1 == PlaneVerdict::NonStandard));
        }
    }

    #[test]
    fn heart_with_bad_descending_aorta_is_non_standard() {
        let flags: Vec<(usize, bool)> = section_structures(Section::Heart)
            .iter()
            .map(|s| (s.id, s.abbrev != "DAO"))
            .collect();
        assert_eq!(verdict(&flags, Section::Heart).unwrap(), PlaneVerdict::NonStandard);
    }

    #[test]
    fn verdict_rejects_foreign_and_missing_structures() {
        let mut flags = head_flags(&[true; 6]);
        flags.push((crate::anatomy::structure_by_abbrev("LV").unwrap().id, true));
        assert!(verdict(&flags, Section::Head).is_err());
        let partial = &head_flags(&[true; 6])[..4];
        assert!(verdict(partial, Section::Head).is_err());
    }

    #[test]
    fn reduce_with_no_detections_is_all_undetected() {
        let cfg = crate::model::AssessConfig::default();
        let (structures, v) = reduce_detections(&cfg, Section::Abdominal, &[]);
        assert_eq!(structures.len(), 4);
        assert!(structures.iter().all(|s| !s.detected && s.flag == 0));
        assert_eq!(v, PlaneVerdict::NonStandard);
    }

    #[test]
    fn reduce_keeps_best_detection_per_structure() {
        let cfg = crate::model::AssessConfig::default();
        let uv = crate::anatomy::structure_by_abbrev("UV").unwrap().id;
        let dets = [
            Detection {
                bbox: BBox::new(10.0, 10.0, 20.0, 20.0).unwrap(),
                class_id: uv,
                score: 0.6,
                quality: 0.9,
            },
            Detection {
                bbox: BBox::new(40.0, 40.0, 50.0, 50.0).unwrap(),
                class_id: uv,
                score: 0.8,
                quality: 0.2,
            },
        ];
        let (structures, v) = reduce_detections(&cfg, Section::Abdominal, &dets);
        let uv_row = structures.iter().find(|s| s.id == "UV").unwrap();
        assert!(uv_row.detected);
        assert_eq!(uv_row.confidence, 0.8);
        assert_eq!(uv_row.flag, 0); // best detection fails the quality cutoff
        assert_eq!(v, PlaneVerdict::NonStandard);
    }

    #[test]
    fn annotate_empty_report_changes_only_banner() {
        let img = GrayImage::filled(64, 64, 0.5).unwrap();
        let report = QualityReport {
            version: 1,
            section: Section::Head,
            structures: vec![],
            verdict: PlaneVerdict::NonStandard,
            timing_s: 0.0,
        };
        let out = annotate(&img, &report);
        for y in 0..64 {
            for x in 0..64 {
                if y < BANNER_ROWS {
                    assert_eq!(out.get(x, y), 0.35);
                } else {
                    assert_eq!(out.get(x, y), 0.5);
                }
            }
        }
    }

    #[test]
    fn annotate_draws_one_rectangle() {
        let img = GrayImage::filled(64, 64, 0.0).unwrap();
        let report = QualityReport {
            version: 1,
            section: Section::Head,
            structures: vec![StructureAssessment {
                id: "T".into(),
                name: "thalamus".into(),
                detected: true,
                bbox: Some([10.0, 20.0, 30.0, 40.0]),
                flag: 1,
                confidence: 0.9,
                quality_prob: 0.8,
            }],
            verdict: PlaneVerdict::NonStandard,
            timing_s: 0.0,
        };
        let out = annotate(&img, &report);
        // border pixels on, interior off
        assert_eq!(out.get(10, 20), 1.0);
        assert_eq!(out.get(29, 39), 1.0);
        assert_eq!(out.get(20, 30), 0.0);
        // deterministic
        assert_eq!(annotate(&img, &report), out);
    }
}
