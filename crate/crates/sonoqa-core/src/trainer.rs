//! End-to-end multi-task training at desk scale.
//!
//! One step stages the whole model onto a tape, accumulates the four task
//! losses over a small batch, runs backward once, and applies SGD with
//! momentum. All sampling (batch order, negative anchors, background ROIs)
//! derives from the run seed, so training is bit-reproducible and can be
//! resumed from a checkpointed epoch boundary.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::anatomy::{Section, BACKGROUND_CLASS};
use crate::backbone;
use crate::classifier::{
    binary_cross_entropy, classify_batch, focal_binary_loss, focal_multiclass_loss, roi_features,
};
use crate::detector::{
    assign, encode_box, fpn_forward, generate_anchors, grid_extent, rpn_forward, Anchor,
    AnchorAssignment, AnchorLabel, BBox,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalSample};
use crate::model::{Model, ModelConfig, ModelTensors};
use crate::phantom::Annotation;
use crate::preprocess::GrayImage;
use crate::real::Real;
use crate::relation;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

/// Train/validation/test ratios are fixed at 3:1:1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
}

/// Deterministic shuffled 3:1:1 partition of 0..n: ⌊3n/5⌋ train, ⌊n/5⌋
/// validation, remainder test. Needs at least 5 items.
pub fn split_dataset(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if n < 5 {
        return Err(Error::Data(format!("split needs at least 5 samples, got {n}")));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    Rng::new(spec.seed).fork(0x3511).shuffle(&mut indices);
    let n_train = 3 * n / 5;
    let n_val = n / 5;
    let val = indices.split_off(n_train);
    let (val, test) = {
        let mut v = val;
        let t = v.split_off(n_val);
        (v, t)
    };
    Ok((indices, val, test))
}

/// Task weighting of the combined loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub objectness: f64,
    pub box_regression: f64,
    pub classification: f64,
    pub quality: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { objectness: 1.0, box_regression: 1.0, classification: 1.0, quality: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.objectness, self.box_regression, self.classification, self.quality];
        if all.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Multiplier applied every `lr_decay_epochs` epochs.
    pub lr_decay_factor: f64,
    pub lr_decay_epochs: Option<usize>,
    pub weights: LossWeights,
    pub seed: u64,
    /// Negative anchors sampled per positive (caps the background term).
    pub neg_per_pos: usize,
    /// Background ROIs fed to the class head per image.
    pub background_rois: usize,
    /// Ground-truth ROI center jitter (pixels).
    pub roi_jitter_px: f64,
    /// Global gradient-norm clip; None disables.
    pub grad_clip: Option<f64>,
    pub gamma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 4,
            learning_rate: 0.02,
            momentum: 0.9,
            lr_decay_factor: 0.1,
            lr_decay_epochs: None,
            weights: LossWeights::default(),
            seed: 42,
            neg_per_pos: 3,
            background_rois: 4,
            roi_jitter_px: 2.0,
            grad_clip: Some(10.0),
            gamma: 2.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("bad learning rate or momentum".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config("gamma must be ≥ 0".into()));
        }
        self.weights.validate()
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_epochs {
            Some(every) if every > 0 => {
                let steps = (epoch / every) as i32;
                self.learning_rate * libm::pow(self.lr_decay_factor, steps as f64)
            }
            _ => self.learning_rate,
        }
    }
}

/// One training image with its ground truth (already preprocessed).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image: GrayImage,
    pub section: Section,
    pub annotations: Vec<Annotation>,
}

/// The four task losses of one image, on-tape.
pub struct LossTerms {
    pub objectness: Tensor,
    pub box_regression: Tensor,
    pub classification: Tensor,
    pub quality: Tensor,
    pub total: Tensor,
}

struct LevelGeometry {
    grid_w: usize,
    grid_h: usize,
    per_loc: usize,
    obj_offset: usize,
    delta_offset: usize,
    anchor_offset: usize,
}

fn level_geometry(config: &ModelConfig, w: usize, h: usize) -> Vec<LevelGeometry> {
    let na = config.fpn.anchors_per_location();
    let mut out = Vec::with_capacity(config.fpn.levels.len());
    let (mut obj_off, mut delta_off, mut anchor_off) = (0, 0, 0);
    for lv in &config.fpn.levels {
        let (gw, gh) = (grid_extent(w, lv.stride), grid_extent(h, lv.stride));
        out.push(LevelGeometry {
            grid_w: gw,
            grid_h: gh,
            per_loc: na,
            obj_offset: obj_off,
            delta_offset: delta_off,
            anchor_offset: anchor_off,
        });
        obj_off += na * gh * gw;
        delta_off += 4 * na * gh * gw;
        anchor_off += na * gh * gw;
    }
    out
}

/// (flat objectness index, flat delta indices) of one anchor in the
/// concatenated head outputs.
fn anchor_indices(levels: &[LevelGeometry], anchor: usize) -> (usize, [usize; 4]) {
    let li = levels
        .iter()
        .rposition(|l| anchor >= l.anchor_offset)
        .expect("anchor within configured levels");
    let l = &levels[li];
    let local = anchor - l.anchor_offset;
    let cell = local / l.per_loc;
    let a = local % l.per_loc;
    let (y, x) = (cell / l.grid_w, cell % l.grid_w);
    let obj = l.obj_offset + (a * l.grid_h + y) * l.grid_w + x;
    let mut deltas = [0usize; 4];
    for (c, d) in deltas.iter_mut().enumerate() {
        *d = l.delta_offset + ((4 * a + c) * l.grid_h + y) * l.grid_w + x;
    }
    (obj, deltas)
}

fn zero_scalar<T: Real>(g: &Tape<T>) -> Result<Tensor> {
    g.constant(&[1], vec![T::ZERO])
}

/// Build the combined multi-task loss of one image:
/// λ_obj·BCE(objectness) + λ_box·smooth-L1(deltas, positives only)
/// + λ_cls·focal(class) + λ_q·focal(quality), each term mean-normalized.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Real>(
    g: &Tape<T>,
    tensors: &ModelTensors,
    config: &ModelConfig,
    train: &TrainConfig,
    sample: &TrainSample,
    anchors: &[Anchor],
    assignments: &[AnchorAssignment],
    sampler_seed: u64,
) -> Result<LossTerms> {
    if anchors.is_empty() {
        return Err(Error::Data("no anchors for this image".into()));
    }
    let (w, h) = (sample.image.width(), sample.image.height());
    let image = backbone::image_tensor(g, &sample.image)?;
    let maps = backbone::extract(g, &tensors.fen, image)?;
    let pyramids = fpn_forward(g, &tensors.fpn, maps[2], maps[3], maps[4])?;
    let heads = rpn_forward(g, &tensors.rpn, &pyramids)?;
    let levels = level_geometry(config, w, h);

    // flatten head outputs so anchors can be gathered by index
    let obj_parts: Vec<Tensor> = heads.iter().map(|(o, _)| *o).collect();
    let delta_parts: Vec<Tensor> = heads.iter().map(|(_, d)| *d).collect();
    let obj_flat = g.concat(&obj_parts)?;
    let delta_flat = g.concat(&delta_parts)?;

    // anchor sampling: all positives, seeded negatives at neg_per_pos:1
    let rng = Rng::new(sampler_seed);
    let positives: Vec<(usize, usize)> = assignments
        .iter()
        .filter_map(|a| match a.label {
            AnchorLabel::Positive { gt, .. } => Some((a.anchor, gt)),
            AnchorLabel::Negative => None,
        })
        .collect();
    let mut negatives: Vec<usize> = assignments
        .iter()
        .filter_map(|a| matches!(a.label, AnchorLabel::Negative).then_some(a.anchor))
        .collect();
    let mut neg_rng = rng.fork(1);
    neg_rng.shuffle(&mut negatives);
    let n_neg = (train.neg_per_pos * positives.len()).max(8).min(negatives.len());
    negatives.truncate(n_neg);

    let mut obj_idx = Vec::with_capacity(positives.len() + negatives.len());
    let mut obj_target = Vec::with_capacity(obj_idx.capacity());
    for &(a, _) in &positives {
        obj_idx.push(anchor_indices(&levels, a).0);
        obj_target.push(true);
    }
    for &a in &negatives {
        obj_idx.push(anchor_indices(&levels, a).0);
        obj_target.push(false);
    }
    let objectness = if obj_idx.is_empty() {
        zero_scalar(g)?
    } else {
        let logits = g.gather(obj_flat, &obj_idx)?;
        binary_cross_entropy(g, logits, &obj_target)?
    };

    // box regression on positives
    let box_regression = if positives.is_empty() {
        zero_scalar(g)?
    } else {
        let mut idx = Vec::with_capacity(4 * positives.len());
        let mut target = Vec::with_capacity(4 * positives.len());
        for &(a, gt) in &positives {
            let (_, delta_idx) = anchor_indices(&levels, a);
            let d = encode_box(sample.annotations[gt].bbox, anchors[a].bbox);
            idx.extend_from_slice(&delta_idx);
            for v in [d.dx, d.dy, d.dw, d.dh] {
                target.push(T::from_f64(v));
            }
        }
        let pred = g.gather(delta_flat, &idx)?;
        let tgt = g.constant(&[target.len()], target)?;
        g.mean(g.smooth_l1(g.sub(pred, tgt)?)?)?
    };

    // class-prediction ROIs: jittered ground truths + background boxes
    let mut rois: Vec<BBox> = Vec::new();
    let mut class_targets: Vec<usize> = Vec::new();
    let mut quality_targets: Vec<Option<bool>> = Vec::new();
    let mut jitter_rng = rng.fork(2);
    for ann in &sample.annotations {
        let dx = jitter_rng.range_f64(-train.roi_jitter_px, train.roi_jitter_px);
        let dy = jitter_rng.range_f64(-train.roi_jitter_px, train.roi_jitter_px);
        let moved = BBox {
            x_min: (ann.bbox.x_min + dx).max(0.0),
            y_min: (ann.bbox.y_min + dy).max(0.0),
            x_max: (ann.bbox.x_max + dx).min(w as f64),
            y_max: (ann.bbox.y_max + dy).min(h as f64),
        };
        let roi = if moved.x_max > moved.x_min && moved.y_max > moved.y_min {
            moved
        } else {
            ann.bbox
        };
        rois.push(roi);
        class_targets.push(ann.class_id);
        quality_targets.push(Some(ann.flag == 1));
    }
    let mut bg_rng = rng.fork(3);
    let gt_boxes: Vec<BBox> = sample.annotations.iter().map(|a| a.bbox).collect();
    let max_side = 48.0f64.min(w.min(h) as f64 - 2.0);
    for _ in 0..train.background_rois {
        for _try in 0..20 {
            let bw = bg_rng.range_f64(10.0f64.min(max_side), max_side);
            let bh = bg_rng.range_f64(10.0f64.min(max_side), max_side);
            let cx = bg_rng.range_f64(bw / 2.0, w as f64 - bw / 2.0);
            let cy = bg_rng.range_f64(bh / 2.0, h as f64 - bh / 2.0);
            let candidate = BBox {
                x_min: cx - bw / 2.0,
                y_min: cy - bh / 2.0,
                x_max: cx + bw / 2.0,
                y_max: cy + bh / 2.0,
            };
            let overlap = gt_boxes
                .iter()
                .map(|g| crate::detector::iou(candidate, *g))
                .fold(0.0, f64::max);
            if overlap < 0.3 {
                rois.push(candidate);
                class_targets.push(BACKGROUND_CLASS);
                quality_targets.push(None);
                break;
            }
        }
    }

    let (classification, quality) = if rois.is_empty() {
        (zero_scalar(g)?, zero_scalar(g)?)
    } else {
        let feats = roi_features(
            g,
            &tensors.cpn,
            &config.cpn,
            &pyramids,
            &config.fpn,
            &rois,
            w,
            h,
        )?;
        let geoms: Vec<relation::RoiGeometry> =
            rois.iter().map(|b| relation::RoiGeometry::from_bbox(*b)).collect();
        let fused = relation::fuse(g, &tensors.cpn.relation, feats, &geoms, &config.relation)?;
        let (class_logits, qual_logits) = classify_batch(g, &tensors.cpn, fused)?;
        let classification = focal_multiclass_loss(g, class_logits, &class_targets, train.gamma)?;
        let flagged: Vec<usize> = quality_targets
            .iter()
            .enumerate()
            .filter_map(|(i, q)| q.is_some().then_some(i))
            .collect();
        let quality = if flagged.is_empty() {
            zero_scalar(g)?
        } else {
            let logits = g.gather(qual_logits, &flagged)?;
            let targets: Vec<bool> =
                flagged.iter().map(|&i| quality_targets[i].unwrap()).collect();
            focal_binary_loss(g, logits, &targets, train.gamma)?
        };
        (classification, quality)
    };

    let lw = &train.weights;
    let mut total = g.scale(objectness, T::from_f64(lw.objectness))?;
    total = g.add(total, g.scale(box_regression, T::from_f64(lw.box_regression))?)?;
    total = g.add(total, g.scale(classification, T::from_f64(lw.classification))?)?;
    total = g.add(total, g.scale(quality, T::from_f64(lw.quality))?)?;
    Ok(LossTerms { objectness, box_regression, classification, quality, total })
}

/// SGD with momentum: v ← μ·v + g, p ← p − η·v. The first step from zero
/// velocity moves parameters by exactly −η·g.
pub fn sgd_update<T: Real>(
    values: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    learning_rate: f64,
    momentum: f64,
) {
    let lr = T::from_f64(learning_rate);
    let mu = T::from_f64(momentum);
    for ((p, &g), v) in values.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mu * *v + g;
        *p -= lr * *v;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T: Real> {
    pub velocities: Vec<Vec<T>>,
    pub next_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub objectness: f64,
    pub box_regression: f64,
    pub classification: f64,
    pub quality: f64,
    pub total: f64,
    pub val_map: Option<f64>,
    pub val_verdict_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

/// Invoked after every epoch with the stats, the updated model and the
/// optimizer state (checkpoint hook).
pub type EpochCallback<'a, T> =
    &'a mut dyn FnMut(&EpochStats, &Model<T>, &TrainState<T>) -> Result<()>;

/// Train in place. Validation metrics per epoch come from the same
/// evaluation path as `eval`. Returns the log and the optimizer state for
/// checkpoint/resume; pass the restored state to continue a run.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train_set: &[TrainSample],
    val_set: Option<&[EvalSample]>,
    config: &TrainConfig,
    resume: Option<TrainState<T>>,
    mut on_epoch: Option<EpochCallback<'_, T>>,
) -> Result<(TrainLog, TrainState<T>)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let (w, h) = (train_set[0].image.width(), train_set[0].image.height());
    if train_set.iter().any(|s| s.image.width() != w || s.image.height() != h) {
        return Err(Error::Data("training images must share one size".into()));
    }
    let anchors = generate_anchors(w, h, &model.config.fpn);
    let anchor_boxes: Vec<BBox> = anchors.iter().map(|a| a.bbox).collect();
    let assignments: Vec<Vec<AnchorAssignment>> = train_set
        .iter()
        .map(|s| {
            let gts: Vec<BBox> = s.annotations.iter().map(|a| a.bbox).collect();
            assign(&anchor_boxes, &gts, 0.5)
        })
        .collect::<Result<_>>()?;

    let mut param_count = 0usize;
    let mut sizes = Vec::new();
    model.for_each_param(|_, v| {
        param_count += 1;
        sizes.push(v.len());
    });
    let mut state = match resume {
        Some(s) => {
            if s.velocities.len() != param_count {
                return Err(Error::Config(format!(
                    "resume state has {} parameter groups, model has {param_count}",
                    s.velocities.len()
                )));
            }
            s
        }
        None => TrainState {
            velocities: sizes.iter().map(|&n| vec![T::ZERO; n]).collect(),
            next_epoch: 0,
        },
    };

    let mut log = TrainLog::default();
    let end_epoch = state.next_epoch + config.epochs;
    for epoch in state.next_epoch..end_epoch {
        let lr = config.learning_rate_at(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        Rng::new(config.seed).fork(0xe90c).fork(epoch as u64).shuffle(&mut order);

        let mut sums = [0.0f64; 5];
        let mut n_batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let g: Tape<T> = Tape::new();
            let tensors = model.stage(&g, true)?;
            let mut batch_total: Option<Tensor> = None;
            let mut terms = [0.0f64; 4];
            for &si in chunk {
                let sampler_seed = Rng::new(config.seed)
                    .fork(0x5a3b)
                    .fork(epoch as u64)
                    .fork(si as u64)
                    .next_u64();
                let loss = total_loss(
                    &g,
                    &tensors,
                    &model.config,
                    config,
                    &train_set[si],
                    &anchors,
                    &assignments[si],
                    sampler_seed,
                )?;
                terms[0] += g.value(loss.objectness)?.to_f64();
                terms[1] += g.value(loss.box_regression)?.to_f64();
                terms[2] += g.value(loss.classification)?.to_f64();
                terms[3] += g.value(loss.quality)?.to_f64();
                batch_total = Some(match batch_total {
                    Some(t) => g.add(t, loss.total)?,
                    None => loss.total,
                });
            }
            let inv = 1.0 / chunk.len() as f64;
            let batch_loss = g.scale(batch_total.expect("non-empty chunk"), T::from_f64(inv))?;
            let total_value = g.value(batch_loss)?.to_f64();
            if !total_value.is_finite() {
                return Err(Error::NonFinite { op: "batch loss" });
            }
            g.backward(batch_loss)?;

            // gather gradients in canonical parameter order
            let param_tensors = tensors.param_tensors();
            let mut grads: Vec<Vec<T>> = Vec::with_capacity(param_tensors.len());
            for (t, &len) in param_tensors.iter().zip(&sizes) {
                match g.grad(*t) {
                    Some(gr) => grads.push(gr),
                    None => grads.push(vec![T::ZERO; len]),
                }
            }
            if let Some(clip) = config.grad_clip {
                let mut sq = 0.0f64;
                for gr in &grads {
                    for v in gr {
                        let x = v.to_f64();
                        sq += x * x;
                    }
                }
                let norm = libm::sqrt(sq);
                if !norm.is_finite() {
                    return Err(Error::NonFinite { op: "gradient norm" });
                }
                if norm > clip {
                    let s = T::from_f64(clip / norm);
                    for gr in &mut grads {
                        for v in gr.iter_mut() {
                            *v *= s;
                        }
                    }
                }
            }
            let mut idx = 0usize;
            model.for_each_param_mut(|_, values| {
                sgd_update(values, &grads[idx], &mut state.velocities[idx], lr, config.momentum);
                idx += 1;
            });

            for (s, t) in sums.iter_mut().zip(terms.iter().chain(&[total_value])) {
                *s += t * inv;
            }
            n_batches += 1;
        }

        let inv_b = 1.0 / n_batches as f64;
        let mut stats = EpochStats {
            epoch,
            learning_rate: lr,
            objectness: sums[0] * inv_b,
            box_regression: sums[1] * inv_b,
            classification: sums[2] * inv_b,
            quality: sums[3] * inv_b,
            total: sums[4] * inv_b,
            val_map: None,
            val_verdict_accuracy: None,
        };
        if let Some(val) = val_set {
            if !val.is_empty() {
                let summary = evaluate(model, val)?;
                stats.val_map = summary.overall.map;
                stats.val_verdict_accuracy = summary.overall.verdict_accuracy;
            }
        }
        state.next_epoch = epoch + 1;
        if let Some(cb) = on_epoch.as_deref_mut() {
            cb(&stats, model, &state)?;
        }
        log.epochs.push(stats);
    }
    Ok((log, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_match_ratio() {
        let (train, val, test) = split_dataset(1325, &SplitSpec { seed: 1 }).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (795, 265, 265));
        let (train, val, test) = split_dataset(5, &SplitSpec { seed: 1 }).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (3, 1, 1));
    }

    #[test]
    fn split_too_small_is_error() {
        assert!(split_dataset(4, &SplitSpec { seed: 1 }).is_err());
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        for seed in 0..100 {
            let spec = SplitSpec { seed };
            let (a1, b1, c1) = split_dataset(53, &spec).unwrap();
            let (a2, b2, c2) = split_dataset(53, &spec).unwrap();
            assert_eq!((&a1, &b1, &c1), (&a2, &b2, &c2));
            let mut all: Vec<usize> =
                a1.iter().chain(&b1).chain(&c1).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..53).collect::<Vec<_>>(), "seed {seed}");
        }
    }

    #[test]
    fn sgd_first_step_is_exactly_lr_times_grad() {
        let mut values = [3.0f64, -1.5];
        let grad = [2.0, 4.0];
        let mut velocity = [0.0, 0.0];
        sgd_update(&mut values, &grad, &mut velocity, 0.25, 0.9);
        assert_eq!(values, [3.0 - 0.25 * 2.0, -1.5 - 0.25 * 4.0]);
        assert_eq!(velocity, grad);
    }

    #[test]
    fn sgd_minimizes_quadratic_via_tape() {
        // f(x) = (x−3)², gradient from the tape, plain SGD steps.
        let mut x = vec![10.0f64];
        let mut v = vec![0.0f64];
        for _ in 0..200 {
            let g: Tape<f64> = Tape::new();
            let xt = g.variable(&[1], x.clone()).unwrap();
            let c = g.constant(&[1], vec![3.0]).unwrap();
            let d = g.sub(xt, c).unwrap();
            let loss = g.mul(d, d).unwrap();
            let loss = g.sum(loss).unwrap();
            g.backward(loss).unwrap();
            let grad = g.grad(xt).unwrap();
            sgd_update(&mut x, &grad, &mut v, 0.05, 0.5);
        }
        assert!((x[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn lr_schedule_steps() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            lr_decay_factor: 0.1,
            lr_decay_epochs: Some(2),
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(0), 1.0);
        assert_eq!(cfg.learning_rate_at(1), 1.0);
        assert!((cfg.learning_rate_at(2) - 0.1).abs() < 1e-12);
        assert!((cfg.learning_rate_at(5) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn weights_must_not_all_vanish() {
        let w = LossWeights {
            objectness: 0.0,
            box_regression: 0.0,
            classification: 0.0,
            quality: 0.0,
        };
        assert!(w.validate().is_err());
    }
}
