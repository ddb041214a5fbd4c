//! Region proposal: pyramid anchors, IoU, assignment, box regression, NMS.
//!
//! Anchors are generated on a five-level feature pyramid (strides 8–128,
//! base sizes 32–512). An anchor is a positive training sample when its
//! best IoU against the ground truth strictly exceeds 0.5; additionally the
//! best anchor of every ground-truth box is force-matched so small
//! structures never go unsupervised.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ConvParam;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

/// Axis-aligned box in pixel coordinates, positive extents. Serializes as
/// the 4-array [x_min, y_min, x_max, y_max].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Serialize for BBox {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> core::result::Result<S::Ok, S::Error> {
        [self.x_min, self.y_min, self.x_max, self.y_max].serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> core::result::Result<Self, D::Error> {
        let [x_min, y_min, x_max, y_max] = <[f64; 4]>::deserialize(deserializer)?;
        BBox::new(x_min, y_min, x_max, y_max).map_err(serde::de::Error::custom)
    }
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<BBox> {
        let b = BBox { x_min, y_min, x_max, y_max };
        if !(x_max > x_min && y_max > y_min)
            || [x_min, y_min, x_max, y_max].iter().any(|v| !v.is_finite())
        {
            return Err(Error::Input(format!("degenerate box {b:?}")));
        }
        Ok(b)
    }

    pub fn width(self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    /// Clip to [0,w]×[0,h]; None if nothing is left.
    pub fn clip(self, w: f64, h: f64) -> Option<BBox> {
        let b = BBox {
            x_min: self.x_min.max(0.0),
            y_min: self.y_min.max(0.0),
            x_max: self.x_max.min(w),
            y_max: self.y_max.min(h),
        };
        (b.x_max > b.x_min && b.y_max > b.y_min).then_some(b)
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: BBox, b: BBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// One pyramid row: anchors of base area size² are laid out every `stride`
/// pixels on level `level`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpnLevel {
    pub level: u32,
    pub stride: u32,
    pub size: u32,
}

/// Pyramid and proposal settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpnConfig {
    pub levels: Vec<FpnLevel>,
    pub aspect_ratios: Vec<f64>,
    /// Channel width of the lateral projections and heads.
    pub channels: usize,
    pub nms_iou: f64,
    /// Proposals kept after NMS.
    pub top_k: usize,
}

impl Default for FpnConfig {
    fn default() -> Self {
        FpnConfig {
            levels: vec![
                FpnLevel { level: 3, stride: 8, size: 32 },
                FpnLevel { level: 4, stride: 16, size: 64 },
                FpnLevel { level: 5, stride: 32, size: 128 },
                FpnLevel { level: 6, stride: 64, size: 256 },
                FpnLevel { level: 7, stride: 128, size: 512 },
            ],
            aspect_ratios: vec![0.5, 1.0, 2.0],
            channels: 64,
            nms_iou: 0.5,
            top_k: 100,
        }
    }
}

impl FpnConfig {
    pub fn anchors_per_location(&self) -> usize {
        self.aspect_ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() || self.aspect_ratios.is_empty() {
            return Err(Error::Config("pyramid needs levels and aspect ratios".into()));
        }
        if self.aspect_ratios.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::Config("aspect ratios must be positive".into()));
        }
        if !(0.0 < self.nms_iou && self.nms_iou < 1.0) {
            return Err(Error::Config("nms_iou must lie in (0,1)".into()));
        }
        if self.channels == 0 || self.top_k == 0 {
            return Err(Error::Config("channels and top_k must be positive".into()));
        }
        Ok(())
    }
}

/// Anchor box tagged with its pyramid level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub bbox: BBox,
    pub level: u32,
}

/// Feature-map extent at a given stride (successive halving; exact when the
/// image extent is divisible by the stride).
pub fn grid_extent(image_extent: usize, stride: u32) -> usize {
    image_extent.div_ceil(stride as usize)
}

/// Lay out one anchor per (location, aspect ratio) on every level, centered
/// on the stride grid, base area size², clipped to image bounds.
///
/// Ordering is row-major per level, ratios innermost — the same ordering the
/// head outputs use. For image extents divisible by every stride the total
/// count is exactly Σ_levels (W/s)(H/s)·|ratios|.
pub fn generate_anchors(image_w: usize, image_h: usize, config: &FpnConfig) -> Vec<Anchor> {
    let mut anchors = Vec::new();
    for lv in &config.levels {
        let (gw, gh) = (grid_extent(image_w, lv.stride), grid_extent(image_h, lv.stride));
        let s = lv.stride as f64;
        for y in 0..gh {
            for x in 0..gw {
                let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
                for &ratio in &config.aspect_ratios {
                    let w = lv.size as f64 * libm::sqrt(ratio);
                    let h = lv.size as f64 / libm::sqrt(ratio);
                    let raw = BBox {
                        x_min: cx - 0.5 * w,
                        y_min: cy - 0.5 * h,
                        x_max: cx + 0.5 * w,
                        y_max: cy + 0.5 * h,
                    };
                    if let Some(bbox) = raw.clip(image_w as f64, image_h as f64) {
                        anchors.push(Anchor { bbox, level: lv.level });
                    }
                }
            }
        }
    }
    anchors
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched to a ground-truth box. `forced` marks the per-ground-truth
    /// best-anchor match, which may sit at or below the IoU threshold.
    Positive { gt: usize, forced: bool },
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorAssignment {
    pub anchor: usize,
    pub label: AnchorLabel,
    pub max_iou: f64,
}

/// Label every anchor positive/negative against the ground truth.
///
/// Positive iff max IoU strictly exceeds `threshold` (an anchor at exactly
/// the threshold is negative); ties between ground truths resolve to the
/// lower index. Afterwards the highest-IoU anchor of each ground truth is
/// force-matched, adding at most one positive per ground truth.
pub fn assign(anchors: &[BBox], ground_truths: &[BBox], threshold: f64) -> Result<Vec<AnchorAssignment>> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::Parameter(format!(
            "assignment threshold must lie in (0,1), got {threshold}"
        )));
    }
    let mut out: Vec<AnchorAssignment> = anchors
        .iter()
        .map(|&a| {
            let mut best = 0.0;
            let mut best_gt = None;
            for (gi, &gt) in ground_truths.iter().enumerate() {
                let v = iou(a, gt);
                if v > best {
                    best = v;
                    best_gt = Some(gi);
                }
            }
            let label = match best_gt {
                Some(gi) if best > threshold => AnchorLabel::Positive { gt: gi, forced: false },
                _ => AnchorLabel::Negative,
            };
            AnchorAssignment { anchor: 0, label, max_iou: best }
        })
        .collect();
    for (i, a) in out.iter_mut().enumerate() {
        a.anchor = i;
    }

    for (gi, &gt) in ground_truths.iter().enumerate() {
        let mut best = f64::NEG_INFINITY;
        let mut best_anchor = None;
        for (ai, &a) in anchors.iter().enumerate() {
            let v = iou(a, gt);
            if v > best {
                best = v;
                best_anchor = Some(ai);
            }
        }
        if let Some(ai) = best_anchor {
            if matches!(out[ai].label, AnchorLabel::Negative) && best > 0.0 {
                out[ai].label = AnchorLabel::Positive { gt: gi, forced: true };
            }
        }
    }
    Ok(out)
}

/// Center-offset / log-size box parameterization relative to an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

pub fn encode_box(gt: BBox, anchor: BBox) -> BoxDelta {
    let (gcx, gcy) = gt.center();
    let (acx, acy) = anchor.center();
    BoxDelta {
        dx: (gcx - acx) / anchor.width(),
        dy: (gcy - acy) / anchor.height(),
        dw: libm::log(gt.width() / anchor.width()),
        dh: libm::log(gt.height() / anchor.height()),
    }
}

pub fn decode_box(delta: BoxDelta, anchor: BBox) -> Result<BBox> {
    let (acx, acy) = anchor.center();
    let cx = acx + delta.dx * anchor.width();
    let cy = acy + delta.dy * anchor.height();
    let w = anchor.width() * libm::exp(delta.dw);
    let h = anchor.height() * libm::exp(delta.dh);
    if ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: "decode_box" });
    }
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// Greedy non-maximum suppression. Returns kept indices in pick order
/// (score descending, input index ascending on ties); a candidate is
/// suppressed when its IoU with an already-kept box strictly exceeds the
/// threshold.
pub fn nms(candidates: &[(BBox, f64)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .1
            .partial_cmp(&candidates[a].1)
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&k| iou(candidates[i].0, candidates[k].0) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

// ---- pyramid features and proposal head -------------------------------------

/// Lateral projections and extra downsampling stages of the pyramid.
#[derive(Debug, Clone, PartialEq)]
pub struct FpnParams<T: Real> {
    /// 1×1 projections for the three backbone stages feeding levels 3..5.
    pub lateral: [ConvParam<T>; 3],
    /// 3×3 stride-2 convs producing levels 6 and 7.
    pub down6: ConvParam<T>,
    pub down7: ConvParam<T>,
}

impl<T: Real> FpnParams<T> {
    pub fn init(in_channels: [usize; 3], channels: usize, rng: &mut Rng) -> Self {
        FpnParams {
            lateral: [
                ConvParam::init([channels, in_channels[0], 1, 1], rng),
                ConvParam::init([channels, in_channels[1], 1, 1], rng),
                ConvParam::init([channels, in_channels[2], 1, 1], rng),
            ],
            down6: ConvParam::init([channels, channels, 3, 3], rng),
            down7: ConvParam::init([channels, channels, 3, 3], rng),
        }
    }
}

/// Objectness + box-delta head shared across pyramid levels.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnParams<T: Real> {
    pub conv: ConvParam<T>,
    pub objectness: ConvParam<T>,
    pub deltas: ConvParam<T>,
}

impl<T: Real> RpnParams<T> {
    pub fn init(channels: usize, anchors_per_location: usize, rng: &mut Rng) -> Self {
        RpnParams {
            conv: ConvParam::init([channels, channels, 3, 3], rng),
            objectness: ConvParam::init([anchors_per_location, channels, 1, 1], rng),
            deltas: ConvParam::init([4 * anchors_per_location, channels, 1, 1], rng),
        }
    }
}

/// Staged (on-tape) pyramid parameters.
pub struct FpnTensors {
    pub lateral: [(Tensor, Tensor); 3],
    pub down6: (Tensor, Tensor),
    pub down7: (Tensor, Tensor),
}

pub struct RpnTensors {
    pub conv: (Tensor, Tensor),
    pub objectness: (Tensor, Tensor),
    pub deltas: (Tensor, Tensor),
}

impl<T: Real> FpnParams<T> {
    pub fn stage(&self, g: &Tape<T>, trainable: bool) -> Result<FpnTensors> {
        Ok(FpnTensors {
            lateral: [
                self.lateral[0].stage(g, trainable)?,
                self.lateral[1].stage(g, trainable)?,
                self.lateral[2].stage(g, trainable)?,
            ],
            down6: self.down6.stage(g, trainable)?,
            down7: self.down7.stage(g, trainable)?,
        })
    }
}

impl<T: Real> RpnParams<T> {
    pub fn stage(&self, g: &Tape<T>, trainable: bool) -> Result<RpnTensors> {
        Ok(RpnTensors {
            conv: self.conv.stage(g, trainable)?,
            objectness: self.objectness.stage(g, trainable)?,
            deltas: self.deltas.stage(g, trainable)?,
        })
    }
}

/// Build pyramid levels P3..P7 from backbone stages C3..C5: lateral 1×1
/// projections merged top-down with nearest-neighbour upsampling, then two
/// stride-2 convolutions continue the pyramid past C5.
pub fn fpn_forward<T: Real>(
    g: &Tape<T>,
    p: &FpnTensors,
    c3: Tensor,
    c4: Tensor,
    c5: Tensor,
) -> Result<Vec<Tensor>> {
    let l5 = g.conv2d(c5, p.lateral[2].0, p.lateral[2].1, 1, 0)?;
    let l4 = g.conv2d(c4, p.lateral[1].0, p.lateral[1].1, 1, 0)?;
    let l3 = g.conv2d(c3, p.lateral[0].0, p.lateral[0].1, 1, 0)?;
    let p5 = l5;
    let p4 = g.add(l4, g.upsample_nearest_2x(p5)?)?;
    let p3 = g.add(l3, g.upsample_nearest_2x(p4)?)?;
    let p6 = g.conv2d(p5, p.down6.0, p.down6.1, 2, 1)?;
    let p7 = g.conv2d(p6, p.down7.0, p.down7.1, 2, 1)?;
    Ok(vec![p3, p4, p5, p6, p7])
}

/// Per-level raw head outputs: objectness logits [A,H,W] and box deltas
/// [4A,H,W].
pub fn rpn_forward<T: Real>(
    g: &Tape<T>,
    p: &RpnTensors,
    pyramids: &[Tensor],
) -> Result<Vec<(Tensor, Tensor)>> {
    pyramids
        .iter()
        .map(|&lvl| {
            let h = g.relu(g.conv2d(lvl, p.conv.0, p.conv.1, 1, 1)?)?;
            let obj = g.conv2d(h, p.objectness.0, p.objectness.1, 1, 0)?;
            let deltas = g.conv2d(h, p.deltas.0, p.deltas.1, 1, 0)?;
            Ok((obj, deltas))
        })
        .collect()
}

/// Index of the head-output element for anchor `a` at grid cell (y, x):
/// objectness maps are laid out [A, H, W].
pub fn head_index(a: usize, y: usize, x: usize, grid_h: usize, grid_w: usize) -> usize {
    (a * grid_h + y) * grid_w + x
}

/// Scored, decoded region proposal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    pub level: u32,
    pub score: f64,
    /// Index into the full anchor list.
    pub anchor: usize,
}

/// Score every anchor with the head outputs, decode its box delta, and keep
/// the top proposals after NMS. Deterministic given (parameters, image).
pub fn propose<T: Real>(
    g: &Tape<T>,
    head_outputs: &[(Tensor, Tensor)],
    config: &FpnConfig,
    image_w: usize,
    image_h: usize,
) -> Result<Vec<Proposal>> {
    config.validate()?;
    if head_outputs.len() != config.levels.len() {
        return Err(Error::Config(format!(
            "{} head outputs for {} pyramid levels",
            head_outputs.len(),
            config.levels.len()
        )));
    }
    let na = config.anchors_per_location();
    let mut candidates: Vec<(BBox, f64)> = Vec::new();
    let mut meta: Vec<(u32, usize)> = Vec::new();
    let mut anchor_base = 0usize;

    for (lv, &(obj_t, delta_t)) in config.levels.iter().zip(head_outputs) {
        let (gw, gh) = (grid_extent(image_w, lv.stride), grid_extent(image_h, lv.stride));
        let obj_shape = g.shape(obj_t);
        if obj_shape != [na, gh, gw] {
            return Err(Error::Config(format!(
                "level {} head map {obj_shape:?} does not match anchor grid [{na}, {gh}, {gw}]",
                lv.level
            )));
        }
        let scores = g.values(g.sigmoid(obj_t)?);
        let deltas = g.values(delta_t);
        let s = lv.stride as f64;
        for y in 0..gh {
            for x in 0..gw {
                for (a, &ratio) in config.aspect_ratios.iter().enumerate() {
                    let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
                    let w = lv.size as f64 * libm::sqrt(ratio);
                    let h = lv.size as f64 / libm::sqrt(ratio);
                    let raw = BBox {
                        x_min: cx - 0.5 * w,
                        y_min: cy - 0.5 * h,
                        x_max: cx + 0.5 * w,
                        y_max: cy + 0.5 * h,
                    };
                    let Some(anchor) = raw.clip(image_w as f64, image_h as f64) else {
                        continue;
                    };
                    let anchor_index = anchor_base + (y * gw + x) * na + a;
                    let delta = BoxDelta {
                        dx: deltas[head_index(4 * a, y, x, gh, gw)].to_f64(),
                        dy: deltas[head_index(4 * a + 1, y, x, gh, gw)].to_f64(),
                        dw: deltas[head_index(4 * a + 2, y, x, gh, gw)].to_f64(),
                        dh: deltas[head_index(4 * a + 3, y, x, gh, gw)].to_f64(),
                    };
                    let decoded = decode_box(delta, anchor)?;
                    if let Some(clipped) = decoded.clip(image_w as f64, image_h as f64) {
                        candidates.push((clipped, scores[head_index(a, y, x, gh, gw)].to_f64()));
                        meta.push((lv.level, anchor_index));
                    }
                }
            }
        }
        anchor_base += gw * gh * na;
    }

    let kept = nms(&candidates, config.nms_iou);
    Ok(kept
        .into_iter()
        .take(config.top_k)
        .map(|i| Proposal {
            bbox: candidates[i].0,
            level: meta[i].0,
            score: candidates[i].1,
            anchor: meta[i].1,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_identity_disjoint_and_hand_case() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(a, a), 1.0);
        assert_eq!(iou(a, bx(5.0, 5.0, 6.0, 6.0)), 0.0);
        // intersection 1, union 7
        assert_eq!(iou(a, bx(1.0, 1.0, 3.0, 3.0)), 1.0 / 7.0);
    }

    #[test]
    fn anchor_counts_on_256() {
        let cfg = FpnConfig::default();
        let anchors = generate_anchors(256, 256, &cfg);
        let level3 = anchors.iter().filter(|a| a.level == 3).count();
        assert_eq!(level3, 32 * 32 * 3);
        assert_eq!(anchors.len(), 3 * (32 * 32 + 16 * 16 + 8 * 8 + 4 * 4 + 2 * 2));
    }

    #[test]
    fn ratio_one_anchor_at_level5_is_128_square() {
        let cfg = FpnConfig::default();
        let anchors = generate_anchors(512, 512, &cfg);
        let a = anchors
            .iter()
            .find(|a| {
                a.level == 5
                    && (a.bbox.width() - 128.0).abs() < 1e-9
                    && (a.bbox.height() - 128.0).abs() < 1e-9
            })
            .expect("interior square anchor at level 5");
        assert!((a.bbox.area() - 128.0 * 128.0).abs() < 1e-6);
    }

    #[test]
    fn assign_exact_threshold_is_negative() {
        // IoU(anchor, gt) is exactly 0.5; the strict rule labels it negative.
        let gt = bx(0.0, 0.0, 2.0, 2.0);
        let anchors = [bx(0.0, 0.0, 2.0, 1.0), bx(0.0, 0.0, 2.0, 2.0)];
        let got = assign(&anchors, &[gt], 0.5).unwrap();
        assert_eq!(iou(anchors[0], gt), 0.5);
        assert_eq!(got[0].label, AnchorLabel::Negative);
        assert_eq!(got[1].label, AnchorLabel::Positive { gt: 0, forced: false });
    }

    #[test]
    fn assign_no_ground_truth_all_negative() {
        let anchors = [bx(0.0, 0.0, 2.0, 2.0), bx(1.0, 1.0, 4.0, 4.0)];
        let got = assign(&anchors, &[], 0.5).unwrap();
        assert!(got.iter().all(|a| a.label == AnchorLabel::Negative));
    }

    #[test]
    fn assign_force_matches_best_anchor() {
        // Tiny gt: no anchor reaches 0.5, but the closest one must be matched.
        let gt = bx(10.0, 10.0, 14.0, 14.0);
        let anchors = [bx(0.0, 0.0, 32.0, 32.0), bx(40.0, 40.0, 72.0, 72.0)];
        let got = assign(&anchors, &[gt], 0.5).unwrap();
        assert_eq!(got[0].label, AnchorLabel::Positive { gt: 0, forced: true });
        assert_eq!(got[1].label, AnchorLabel::Negative);
        let forced = got
            .iter()
            .filter(|a| matches!(a.label, AnchorLabel::Positive { forced: true, .. }))
            .count();
        assert_eq!(forced, 1);
    }

    #[test]
    fn encode_identity_and_log_width() {
        let a = bx(10.0, 20.0, 30.0, 60.0);
        let d = encode_box(a, a);
        assert_eq!((d.dx, d.dy, d.dw, d.dh), (0.0, 0.0, 0.0, 0.0));

        let wide = bx(0.0, 20.0, 40.0, 60.0); // same center, twice the width
        let d2 = encode_box(wide, a);
        assert!((d2.dw - libm::log(2.0)).abs() < 1e-12);
        assert_eq!(d2.dh, 0.0);
    }

    #[test]
    fn nms_keeps_highest_of_identical_pair() {
        let b = bx(0.0, 0.0, 4.0, 4.0);
        let kept = nms(&[(b, 0.8), (b, 0.9)], 0.5);
        assert_eq!(kept, vec![1]);
    }

    #[test]
    fn nms_disjoint_all_kept() {
        let kept = nms(
            &[(bx(0.0, 0.0, 1.0, 1.0), 0.3), (bx(5.0, 5.0, 6.0, 6.0), 0.9)],
            0.5,
        );
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn nms_chain_keeps_ends() {
        // A overlaps B, B overlaps C, A and C disjoint, scores A > B > C.
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = bx(5.0, 0.0, 15.0, 10.0);
        let c = bx(10.0, 0.0, 20.0, 10.0);
        assert!(iou(a, b) > 0.3 && iou(b, c) > 0.3 && iou(a, c) == 0.0);
        let kept = nms(&[(a, 0.9), (b, 0.8), (c, 0.7)], 0.3);
        assert_eq!(kept, vec![0, 2]);
    }

    #[test]
    fn top_k_one_returns_the_single_best_proposal() {
        let g: Tape<f64> = Tape::new();
        let mut rng = Rng::new(31);
        let cfg = FpnConfig { channels: 4, ..FpnConfig::default() };
        let rpn = RpnParams::<f64>::init(4, 3, &mut rng);
        let staged = rpn.stage(&g, false).unwrap();
        let maps: Vec<Tensor> = cfg
            .levels
            .iter()
            .map(|lv| {
                let e = grid_extent(128, lv.stride);
                let vals = (0..4 * e * e).map(|_| rng.range_f64(-1.0, 1.0)).collect();
                g.constant(&[4, e, e], vals).unwrap()
            })
            .collect();
        let heads = rpn_forward(&g, &staged, &maps).unwrap();
        let all = propose(&g, &heads, &FpnConfig { top_k: 100, ..cfg.clone() }, 128, 128).unwrap();
        let one = propose(&g, &heads, &FpnConfig { top_k: 1, ..cfg }, 128, 128).unwrap();
        assert_eq!(one.len(), 1);
        let best = all.iter().map(|p| p.score).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(one[0].score, best);
        assert_eq!(one[0].anchor, all[0].anchor);
    }

    #[test]
    fn propose_with_zero_head_returns_anchors_at_half_score() {
        let g: Tape<f64> = Tape::new();
        let cfg = FpnConfig { channels: 4, top_k: 16, ..FpnConfig::default() };
        let (iw, ih) = (128usize, 128usize);
        // Pyramid maps with the right extents; head weights all zero.
        let rpn = RpnParams::<f64> {
            conv: ConvParam::zeros([4, 4, 3, 3]),
            objectness: ConvParam::zeros([3, 4, 1, 1]),
            deltas: ConvParam::zeros([12, 4, 1, 1]),
        };
        let staged = rpn.stage(&g, false).unwrap();
        let maps: Vec<Tensor> = cfg
            .levels
            .iter()
            .map(|lv| {
                let e = grid_extent(iw, lv.stride);
                g.constant(&[4, e, e], vec![0.1; 4 * e * e]).unwrap()
            })
            .collect();
        let heads = rpn_forward(&g, &staged, &maps).unwrap();
        let proposals = propose(&g, &heads, &cfg, iw, ih).unwrap();
        assert!(!proposals.is_empty());
        assert!(proposals.len() <= 16);
        let anchors = generate_anchors(iw, ih, &cfg);
        for p in &proposals {
            assert_eq!(p.score, 0.5);
            let a = anchors[p.anchor].bbox;
            assert!((p.bbox.x_min - a.x_min).abs() < 1e-9);
            assert!((p.bbox.y_max - a.y_max).abs() < 1e-9);
        }
    }
}
