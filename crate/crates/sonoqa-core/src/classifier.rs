//! Class prediction: per-ROI structure classification and quality flags.
//!
//! ROI features are pooled from the pyramid (per-ROI SPP crop + linear
//! projection), fused by the relation module, then split into a softmax
//! structure head and a sigmoid quality head. Training uses focal loss,
//! −(1−p_t)^γ·log(p_t), after Lin et al., "Focal Loss for Dense Object
//! Detection" (2017): γ > 0 down-weights easy examples.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::anatomy::NUM_CLASSES;
use crate::detector::{BBox, FpnConfig};
use crate::error::{Error, Result};
use crate::nn::LinearParam;
use crate::real::Real;
use crate::relation::{RelationConfig, RelationParams, RelationTensors};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

/// Probabilities below this are clamped before the logarithm.
pub const FOCAL_CLAMP: f64 = 1e-7;

/// p_t: probability assigned to the true outcome.
pub fn p_t(p: f64, y: bool) -> f64 {
    if y {
        p
    } else {
        1.0 - p
    }
}

/// Focal loss −(1−p_t)^γ·ln(p_t), evaluated with p_t clamped to ≥ 1e-7 so
/// a zero probability yields a large finite loss instead of diverging.
pub fn focal_loss(p_t: f64, gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_t) || !p_t.is_finite() {
        return Err(Error::Parameter(format!("p_t must lie in [0,1], got {p_t}")));
    }
    if !(gamma >= 0.0) {
        return Err(Error::Parameter(format!("gamma must be ≥ 0, got {gamma}")));
    }
    Ok(-libm::pow(1.0 - p_t, gamma) * libm::log(p_t.max(FOCAL_CLAMP)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { gamma: 2.0 }
    }
}

/// Per-ROI prediction: a distribution over structures + background, and the
/// probability that the structure meets the standard.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrediction {
    pub class_probs: Vec<f64>,
    pub quality: f64,
}

impl ClassPrediction {
    pub fn best_class(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.class_probs.iter().enumerate() {
            if p > self.class_probs[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpnConfig {
    /// SPP grids used to pool each ROI crop.
    pub roi_spp_levels: alloc::vec::Vec<usize>,
    /// The pooled window is the ROI scaled by this factor about its
    /// center, so the features see surrounding context (septa, outline).
    pub roi_context: f64,
    pub focal: FocalParams,
}

impl Default for CpnConfig {
    fn default() -> Self {
        CpnConfig {
            roi_spp_levels: alloc::vec![1, 2, 4],
            roi_context: 1.5,
            focal: FocalParams::default(),
        }
    }
}

impl CpnConfig {
    pub fn roi_bins(&self) -> usize {
        self.roi_spp_levels.iter().map(|g| g * g).sum()
    }
}

/// Class-prediction parameters: ROI feature projection, relation module,
/// class head, quality head.
#[derive(Debug, Clone, PartialEq)]
pub struct CpnParams<T: Real> {
    /// [d_f, channels·Σg²] projection of pooled ROI features.
    pub proj: LinearParam<T>,
    pub relation: RelationParams<T>,
    /// [NUM_CLASSES, d_f]
    pub class_head: LinearParam<T>,
    /// [1, d_f]
    pub quality_head: LinearParam<T>,
    pub config: CpnConfig,
}

impl<T: Real> CpnParams<T> {
    pub fn init(
        config: CpnConfig,
        relation: RelationConfig,
        pyramid_channels: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        relation.validate()?;
        let in_dim = pyramid_channels * config.roi_bins();
        Ok(CpnParams {
            proj: LinearParam::init([relation.d_f, in_dim], rng),
            relation: RelationParams::init(relation, rng)?,
            class_head: LinearParam::init([NUM_CLASSES, relation.d_f], rng),
            quality_head: LinearParam::init([1, relation.d_f], rng),
            config,
        })
    }

    pub fn stage(&self, g: &Tape<T>, trainable: bool) -> Result<CpnTensors> {
        Ok(CpnTensors {
            proj: self.proj.stage(g, trainable)?,
            relation: self.relation.stage(g, trainable)?,
            class_head: self.class_head.stage(g, trainable)?,
            quality_head: self.quality_head.stage(g, trainable)?,
        })
    }
}

pub struct CpnTensors {
    pub proj: (Tensor, Tensor),
    pub relation: RelationTensors,
    pub class_head: (Tensor, Tensor),
    pub quality_head: (Tensor, Tensor),
}

/// Pyramid level an ROI's features are pooled from: level 3 for ~32 px
/// boxes, one level up per doubling, clamped to the available range.
pub fn roi_level(b: BBox) -> u32 {
    let scale = libm::log2(libm::sqrt(b.area()) / 32.0);
    let k = 3.0 + libm::round(scale);
    k.clamp(3.0, 7.0) as u32
}

/// Pool, project and rectify per-ROI appearance features: [N, d_f].
#[allow(clippy::too_many_arguments)]
pub fn roi_features<T: Real>(
    g: &Tape<T>,
    cpn: &CpnTensors,
    cpn_config: &CpnConfig,
    pyramids: &[Tensor],
    fpn_config: &FpnConfig,
    rois: &[BBox],
    image_w: usize,
    image_h: usize,
) -> Result<Tensor> {
    if rois.is_empty() {
        return Err(Error::Input("roi_features needs at least one ROI".into()));
    }
    if pyramids.len() != fpn_config.levels.len() {
        return Err(Error::Config(format!(
            "{} pyramid maps for {} configured levels",
            pyramids.len(),
            fpn_config.levels.len()
        )));
    }
    let levels = &cpn_config.roi_spp_levels;
    let mut pooled = Vec::with_capacity(rois.len());
    for roi in rois {
        if roi.x_max > image_w as f64 + 1e-6 || roi.y_max > image_h as f64 + 1e-6 {
            return Err(Error::Input(format!("ROI {roi:?} exceeds image bounds")));
        }
        let lvl = roi_level(*roi);
        let idx = fpn_config
            .levels
            .iter()
            .position(|l| l.level == lvl)
            .ok_or_else(|| Error::Config(format!("no pyramid level {lvl}")))?;
        let stride = fpn_config.levels[idx].stride as f64;
        let shape = g.shape(pyramids[idx]);
        let (gh, gw) = (shape[1], shape[2]);
        // expand the window around the ROI center for context
        let (cx, cy) = roi.center();
        let half_w = 0.5 * roi.width() * cpn_config.roi_context;
        let half_h = 0.5 * roi.height() * cpn_config.roi_context;
        let x0 = (((cx - half_w).max(0.0) / stride) as usize).min(gw - 1);
        let x1 = (libm::ceil((cx + half_w) / stride) as usize).clamp(x0 + 1, gw);
        let y0 = (((cy - half_h).max(0.0) / stride) as usize).min(gh - 1);
        let y1 = (libm::ceil((cy + half_h) / stride) as usize).clamp(y0 + 1, gh);
        pooled.push(g.spp_region(pyramids[idx], y0, y1, x0, x1, levels)?);
    }
    let in_dim = g.values(pooled[0]).len();
    let flat = g.concat(&pooled)?;
    let stacked = g.reshape(flat, &[rois.len(), in_dim])?;
    let projected = g.matmul_tb(stacked, cpn.proj.0)?;
    g.relu(g.add_row_broadcast(projected, cpn.proj.1)?)
}

/// Class logits [N, NUM_CLASSES] and quality logits [N] from relation-fused
/// ROI features.
pub fn classify_batch<T: Real>(
    g: &Tape<T>,
    cpn: &CpnTensors,
    fused: Tensor,
) -> Result<(Tensor, Tensor)> {
    let n = g.shape(fused)[0];
    let class_logits =
        g.add_row_broadcast(g.matmul_tb(fused, cpn.class_head.0)?, cpn.class_head.1)?;
    let quality =
        g.add_row_broadcast(g.matmul_tb(fused, cpn.quality_head.0)?, cpn.quality_head.1)?;
    Ok((class_logits, g.reshape(quality, &[n])?))
}

/// Single relation-fused feature vector → probabilities (softmax class
/// head, sigmoid quality head). Deterministic given (params, feature).
pub fn classify<T: Real>(feature: &[f64], cpn: &CpnParams<T>) -> Result<ClassPrediction> {
    let d_f = cpn.relation.config.d_f;
    if feature.len() != d_f {
        return Err(Error::Config(format!(
            "feature length {} vs configured d_f {d_f}",
            feature.len()
        )));
    }
    let g: Tape<f64> = Tape::new();
    let f = g.constant(&[1, d_f], feature.to_vec())?;
    let class_w = g.constant(
        &[NUM_CLASSES, d_f],
        cpn.class_head.weights.iter().map(|v| v.to_f64()).collect(),
    )?;
    let class_b =
        g.constant(&[NUM_CLASSES], cpn.class_head.bias.iter().map(|v| v.to_f64()).collect())?;
    let qual_w =
        g.constant(&[1, d_f], cpn.quality_head.weights.iter().map(|v| v.to_f64()).collect())?;
    let qual_b = g.constant(&[1], cpn.quality_head.bias.iter().map(|v| v.to_f64()).collect())?;
    let logits = g.add_row_broadcast(g.matmul_tb(f, class_w)?, class_b)?;
    let probs = g.softmax(logits, 1)?;
    let quality = g.sigmoid(g.add_row_broadcast(g.matmul_tb(f, qual_w)?, qual_b)?)?;
    Ok(ClassPrediction { class_probs: g.values(probs), quality: g.value(quality)? })
}

// ---- differentiable focal losses -----------------------------------------------

/// p_t as a tensor: y·p + (1−y)·(1−p) for a constant 0/1 target mask.
fn p_t_tensor<T: Real>(g: &Tape<T>, p: Tensor, targets: &[bool]) -> Result<Tensor> {
    let n = targets.len();
    let mask: Vec<T> = targets.iter().map(|&y| if y { T::ONE } else { T::ZERO }).collect();
    let inv_mask: Vec<T> = targets.iter().map(|&y| if y { T::ZERO } else { T::ONE }).collect();
    let mask = g.constant(&[n], mask)?;
    let inv_mask = g.constant(&[n], inv_mask)?;
    let one_minus_p = g.add_scalar(g.neg(p)?, T::ONE)?;
    g.add(g.mul(p, mask)?, g.mul(one_minus_p, inv_mask)?)
}

/// mean −(1−p_t)^γ ln(max(p_t, 1e-7)) over a vector of true-class
/// probabilities.
pub fn focal_from_pt<T: Real>(g: &Tape<T>, p_t: Tensor, gamma: f64) -> Result<Tensor> {
    if !(gamma >= 0.0) {
        return Err(Error::Parameter(format!("gamma must be ≥ 0, got {gamma}")));
    }
    let one_minus = g.add_scalar(g.neg(p_t)?, T::ONE)?;
    let weight = g.pow_const(one_minus, T::from_f64(gamma))?;
    let nll = g.neg(g.ln(g.clamp_min(p_t, T::from_f64(FOCAL_CLAMP))?)?)?;
    g.mean(g.mul(weight, nll)?)
}

/// Mean focal loss of class logits [N, NUM_CLASSES] against target indices.
pub fn focal_multiclass_loss<T: Real>(
    g: &Tape<T>,
    class_logits: Tensor,
    targets: &[usize],
    gamma: f64,
) -> Result<Tensor> {
    let shape = g.shape(class_logits);
    let (n, c) = (shape[0], shape[1]);
    if targets.len() != n {
        return Err(Error::Shape {
            op: "focal_multiclass_loss",
            detail: format!("{} targets for {n} rows", targets.len()),
        });
    }
    if targets.iter().any(|&t| t >= c) {
        return Err(Error::Input("class target out of range".into()));
    }
    let probs = g.softmax(class_logits, 1)?;
    let idx: Vec<usize> = targets.iter().enumerate().map(|(i, &t)| i * c + t).collect();
    let p_t = g.gather(probs, &idx)?;
    focal_from_pt(g, p_t, gamma)
}

/// Mean focal loss of binary logits against boolean targets.
pub fn focal_binary_loss<T: Real>(
    g: &Tape<T>,
    logits: Tensor,
    targets: &[bool],
    gamma: f64,
) -> Result<Tensor> {
    let p = g.sigmoid(logits)?;
    let p_t = p_t_tensor(g, p, targets)?;
    focal_from_pt(g, p_t, gamma)
}

/// Mean binary cross-entropy of logits against boolean targets.
pub fn binary_cross_entropy<T: Real>(
    g: &Tape<T>,
    logits: Tensor,
    targets: &[bool],
) -> Result<Tensor> {
    let p = g.sigmoid(logits)?;
    let p_t = p_t_tensor(g, p, targets)?;
    g.mean(g.neg(g.ln(g.clamp_min(p_t, T::from_f64(FOCAL_CLAMP))?)?)?)
}
