//! Object relation module: attention between ROIs.
//!
//! Each ROI's appearance feature is augmented with a weighted sum of the
//! other ROIs' features. The weight between ROIs m and n combines a clamped
//! linear geometry term w_G = max(0, W_G·ε(m,n)) with a scaled dot-product
//! appearance term w_A = ⟨W_K f_m, W_Q f_n⟩/√d_k, normalized per column:
//! w{mn} = w_G{mn}·exp(w_A{mn}) / Σ_k w_G{kn}·exp(w_A{kn}). The fused
//! output is f_n + Σ_m w_{mn}·W_V f_m.
//!
//! Attention of this form between detected objects follows Hu et al.,
//! "Relation Networks for Object Detection" (2018).
//!
//! Two implementations live here on purpose: a plain f64 reference path
//! (the operation contracts below) and the on-tape path used by training
//! and inference. Tests hold them equal.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::detector::BBox;
use crate::error::{Error, Result};
use crate::nn::LinearParam;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

/// Offset added inside the log-ratio geometry terms so coincident box
/// centers stay finite.
pub const GEOMETRY_LOG_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationConfig {
    /// Key dimension of the appearance weight.
    pub d_k: usize,
    /// Geometric embedding dimension (divisible by 8).
    pub d_g: usize,
    /// Appearance feature dimension.
    pub d_f: usize,
    /// Column sums below this fall back to uniform weights.
    pub epsilon_norm: f64,
}

impl Default for RelationConfig {
    fn default() -> Self {
        RelationConfig { d_k: 16, d_g: 32, d_f: 64, epsilon_norm: 1e-9 }
    }
}

impl RelationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_k == 0 || self.d_g == 0 || self.d_f == 0 {
            return Err(Error::Config("relation dimensions must be positive".into()));
        }
        if !self.d_g.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "geometric embedding dimension must be divisible by 8, got {}",
                self.d_g
            )));
        }
        if !(self.epsilon_norm > 0.0) {
            return Err(Error::Config("epsilon_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Learned maps of the relation module.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationParams<T: Real> {
    /// d_g → 1 geometry map.
    pub w_g: Vec<T>,
    /// d_f → d_k key/query maps (stored [d_f, d_k] so F·W composes).
    pub w_k: LinearParam<T>,
    pub w_q: LinearParam<T>,
    /// d_f → d_f value map.
    pub w_v: LinearParam<T>,
    pub config: RelationConfig,
}

impl<T: Real> RelationParams<T> {
    pub fn init(config: RelationConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let bound = libm::sqrt(6.0 / (config.d_g + 1) as f64);
        let w_g = (0..config.d_g).map(|_| T::from_f64(rng.range_f64(-bound, bound))).collect();
        Ok(RelationParams {
            w_g,
            w_k: LinearParam::init([config.d_f, config.d_k], rng),
            w_q: LinearParam::init([config.d_f, config.d_k], rng),
            w_v: LinearParam::init([config.d_f, config.d_f], rng),
            config,
        })
    }
}

/// Box geometry as used by the relation module.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiGeometry {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl RoiGeometry {
    pub fn from_bbox(b: BBox) -> Self {
        let (cx, cy) = b.center();
        RoiGeometry { cx, cy, w: b.width(), h: b.height() }
    }
}

/// Appearance features and geometry for a set of ROIs.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiFeatureSet {
    /// N rows of d_f appearance values.
    pub features: Vec<Vec<f64>>,
    pub geometry: Vec<RoiGeometry>,
}

impl RoiFeatureSet {
    pub fn len(&self) -> usize {
        self.geometry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.geometry.is_empty()
    }
}

/// Raw 4-term log-geometry descriptor of an ordered box pair: translation-
/// and scale-invariant by construction.
pub fn geometry_terms(m: &RoiGeometry, n: &RoiGeometry) -> [f64; 4] {
    [
        libm::log((m.cx - n.cx).abs() / m.w + GEOMETRY_LOG_EPS),
        libm::log((m.cy - n.cy).abs() / m.h + GEOMETRY_LOG_EPS),
        libm::log(n.w / m.w),
        libm::log(n.h / m.h),
    ]
}

/// Lift the 4-term descriptor to dimension d_g by concatenating sinusoids
/// at geometrically spaced wavelengths (d_g/8 frequencies per term, sin and
/// cos each).
pub fn geometric_embed(m: &RoiGeometry, n: &RoiGeometry, d_g: usize) -> Result<Vec<f64>> {
    if d_g == 0 || !d_g.is_multiple_of(8) {
        return Err(Error::Config(format!(
            "geometric embedding dimension must be a positive multiple of 8, got {d_g}"
        )));
    }
    if !(m.w > 0.0 && m.h > 0.0 && n.w > 0.0 && n.h > 0.0) {
        return Err(Error::Input("box extents must be positive".into()));
    }
    let terms = geometry_terms(m, n);
    let freqs = d_g / 8;
    let mut out = Vec::with_capacity(d_g);
    for &t in &terms {
        for k in 0..freqs {
            let wavelength = libm::pow(1000.0, k as f64 / freqs as f64);
            out.push(libm::sin(t / wavelength));
            out.push(libm::cos(t / wavelength));
        }
    }
    Ok(out)
}

/// w_G = max(0, W_G·embed).
pub fn geometry_weight(w_g: &[f64], embed: &[f64]) -> Result<f64> {
    if w_g.len() != embed.len() {
        return Err(Error::Shape {
            op: "geometry_weight",
            detail: format!("{} weights vs {} embed", w_g.len(), embed.len()),
        });
    }
    let dot: f64 = w_g.iter().zip(embed).map(|(a, b)| a * b).sum();
    Ok(dot.max(0.0))
}

/// w_A = ⟨W_K f_m, W_Q f_n⟩ / √d_k. The maps are [d_f, d_k].
pub fn appearance_weight(
    f_m: &[f64],
    f_n: &[f64],
    w_k: &[f64],
    w_q: &[f64],
    d_k: usize,
) -> Result<f64> {
    let d_f = f_m.len();
    if f_n.len() != d_f || w_k.len() != d_f * d_k || w_q.len() != d_f * d_k {
        return Err(Error::Shape {
            op: "appearance_weight",
            detail: format!("d_f {} / d_k {d_k} operands disagree", d_f),
        });
    }
    let mut dot = 0.0;
    for j in 0..d_k {
        let mut km = 0.0;
        let mut qn = 0.0;
        for i in 0..d_f {
            km += f_m[i] * w_k[i * d_k + j];
            qn += f_n[i] * w_q[i * d_k + j];
        }
        dot += km * qn;
    }
    Ok(dot / libm::sqrt(d_k as f64))
}

fn params_f64<T: Real>(p: &RelationParams<T>) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    (
        p.w_g.iter().map(|v| v.to_f64()).collect(),
        p.w_k.weights.iter().map(|v| v.to_f64()).collect(),
        p.w_q.weights.iter().map(|v| v.to_f64()).collect(),
        p.w_v.weights.iter().map(|v| v.to_f64()).collect(),
    )
}

/// N×N relation weight matrix (row m, column n = influence of m on n).
/// Every column is non-negative and sums to 1; columns whose normalizer
/// falls below epsilon_norm become uniform.
pub fn relation_weights<T: Real>(
    set: &RoiFeatureSet,
    params: &RelationParams<T>,
) -> Result<Vec<f64>> {
    let n = set.len();
    if n == 0 {
        return Err(Error::Input("relation needs at least one ROI".into()));
    }
    let cfg = &params.config;
    let (w_g, w_k, w_q, _) = params_f64(params);
    let mut raw = vec![0.0f64; n * n];
    for m in 0..n {
        for j in 0..n {
            let embed = geometric_embed(&set.geometry[m], &set.geometry[j], cfg.d_g)?;
            let wg = geometry_weight(&w_g, &embed)?;
            let wa =
                appearance_weight(&set.features[m], &set.features[j], &w_k, &w_q, cfg.d_k)?;
            raw[m * n + j] = wg * libm::exp(wa);
        }
    }
    for j in 0..n {
        let s: f64 = (0..n).map(|m| raw[m * n + j]).sum();
        if s < cfg.epsilon_norm {
            for m in 0..n {
                raw[m * n + j] = 1.0 / n as f64;
            }
        } else {
            for m in 0..n {
                raw[m * n + j] /= s;
            }
        }
    }
    Ok(raw)
}

/// Relation features f_R(n) = Σ_m w_{mn}·(W_V f_m) and the fused outputs
/// f_n + f_R(n). Weight columns must sum to 1 within 1e-9.
pub fn relation_features<T: Real>(
    set: &RoiFeatureSet,
    weights: &[f64],
    params: &RelationParams<T>,
) -> Result<Vec<Vec<f64>>> {
    let n = set.len();
    let d_f = params.config.d_f;
    if weights.len() != n * n {
        return Err(Error::Shape {
            op: "relation_features",
            detail: format!("{} weights for {n} ROIs", weights.len()),
        });
    }
    for j in 0..n {
        let s: f64 = (0..n).map(|m| weights[m * n + j]).sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("weight column {j} sums to {s}")));
        }
    }
    let (_, _, _, w_v) = params_f64(params);
    // value vectors v_m = W_Vᵀ f_m with W_V stored [d_f, d_f]
    let values: Vec<Vec<f64>> = set
        .features
        .iter()
        .map(|f| {
            (0..d_f)
                .map(|j| (0..d_f).map(|i| f[i] * w_v[i * d_f + j]).sum())
                .collect::<Vec<f64>>()
        })
        .collect();
    let mut fused = Vec::with_capacity(n);
    for roi in 0..n {
        let mut out = set.features[roi].clone();
        for m in 0..n {
            let w = weights[m * n + roi];
            for (o, v) in out.iter_mut().zip(&values[m]) {
                *o += w * v;
            }
        }
        fused.push(out);
    }
    Ok(fused)
}

/// Staged relation parameters.
pub struct RelationTensors {
    pub w_g: Tensor,
    pub w_k: Tensor,
    pub w_q: Tensor,
    pub w_v: Tensor,
}

impl<T: Real> RelationParams<T> {
    pub fn stage(&self, g: &Tape<T>, trainable: bool) -> Result<RelationTensors> {
        let cfg = &self.config;
        let w_g = crate::nn::stage_values(g, &[cfg.d_g, 1], &self.w_g, trainable)?;
        let w_k = crate::nn::stage_values(g, &[cfg.d_f, cfg.d_k], &self.w_k.weights, trainable)?;
        let w_q = crate::nn::stage_values(g, &[cfg.d_f, cfg.d_k], &self.w_q.weights, trainable)?;
        let w_v = crate::nn::stage_values(g, &[cfg.d_f, cfg.d_f], &self.w_v.weights, trainable)?;
        Ok(RelationTensors { w_g, w_k, w_q, w_v })
    }
}

/// On-tape relation fuse: takes ROI features [N, d_f] and geometry, returns
/// the fused features [N, d_f]. Differentiable w.r.t. the features and all
/// four maps; the geometric embedding enters as constants.
pub fn fuse<T: Real>(
    g: &Tape<T>,
    p: &RelationTensors,
    features: Tensor,
    geometry: &[RoiGeometry],
    config: &RelationConfig,
) -> Result<Tensor> {
    config.validate()?;
    let n = geometry.len();
    let shape = g.shape(features);
    if shape != [n, config.d_f] {
        return Err(Error::Shape {
            op: "relation_fuse",
            detail: format!("features {shape:?} for {n} ROIs of dim {}", config.d_f),
        });
    }
    // Pairwise embeds, row (m·n + j) describes (m, j).
    let mut embeds = Vec::with_capacity(n * n * config.d_g);
    for m in 0..n {
        for j in 0..n {
            let e = geometric_embed(&geometry[m], &geometry[j], config.d_g)?;
            embeds.extend(e.into_iter().map(T::from_f64));
        }
    }
    let embeds = g.constant(&[n * n, config.d_g], embeds)?;
    let wg_raw = g.matmul(embeds, p.w_g)?; // [n·n, 1]
    let wg = g.relu(g.reshape(wg_raw, &[n, n])?)?;

    let keys = g.matmul(features, p.w_k)?; // [n, d_k]
    let queries = g.matmul(features, p.w_q)?; // [n, d_k]
    let wa = g.scale(g.matmul_tb(keys, queries)?, T::from_f64(1.0 / libm::sqrt(config.d_k as f64)))?;
    let affinity = g.mul(wg, g.exp(wa)?)?;
    let weights = g.normalize_columns(affinity, T::from_f64(config.epsilon_norm))?;

    let values = g.matmul(features, p.w_v)?; // [n, d_f]
    let relation = g.matmul_ta(weights, values)?; // [n, d_f]
    g.add(features, relation)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(cx: f64, cy: f64, w: f64, h: f64) -> RoiGeometry {
        RoiGeometry { cx, cy, w, h }
    }

    #[test]
    fn coincident_boxes_raw_terms() {
        let a = geom(10.0, 20.0, 4.0, 6.0);
        let t = geometry_terms(&a, &a);
        let log_eps = libm::log(GEOMETRY_LOG_EPS);
        assert_eq!(t[0], log_eps);
        assert_eq!(t[1], log_eps);
        assert_eq!(t[2], 0.0);
        assert_eq!(t[3], 0.0);
    }

    #[test]
    fn embed_translation_invariance() {
        let a = geom(10.0, 20.0, 4.0, 6.0);
        let b = geom(14.0, 26.0, 8.0, 3.0);
        let a2 = geom(20.0, 30.0, 4.0, 6.0);
        let b2 = geom(24.0, 36.0, 8.0, 3.0);
        assert_eq!(
            geometric_embed(&a, &b, 32).unwrap(),
            geometric_embed(&a2, &b2, 32).unwrap()
        );
    }

    #[test]
    fn embed_scale_invariance() {
        let a = geom(10.0, 20.0, 4.0, 6.0);
        let b = geom(14.0, 26.0, 8.0, 3.0);
        let a2 = geom(20.0, 40.0, 8.0, 12.0);
        let b2 = geom(28.0, 52.0, 16.0, 6.0);
        let e1 = geometric_embed(&a, &b, 32).unwrap();
        let e2 = geometric_embed(&a2, &b2, 32).unwrap();
        for (x, y) in e1.iter().zip(&e2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_dim_must_be_multiple_of_8() {
        let a = geom(0.0, 0.0, 1.0, 1.0);
        assert!(matches!(geometric_embed(&a, &a, 12), Err(Error::Config(_))));
    }

    #[test]
    fn geometry_weight_clamps() {
        assert_eq!(geometry_weight(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(geometry_weight(&[-1.0, -1.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(geometry_weight(&[0.5, 1.0], &[1.0, 2.0]).unwrap(), 2.5);
    }

    #[test]
    fn appearance_weight_identity_maps_unit_vector() {
        // W_K = W_Q = identity on d_f = d_k = 4, f = e₁ → dot 1, √4 = 2.
        let d = 4;
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        let f = vec![1.0, 0.0, 0.0, 0.0];
        let w = appearance_weight(&f, &f, &eye, &eye, d).unwrap();
        assert!((w - 0.5).abs() < 1e-15);
        // zero m-side feature → 0
        let z = vec![0.0; d];
        assert_eq!(appearance_weight(&z, &f, &eye, &eye, d).unwrap(), 0.0);
        // bilinearity in f_m
        let f3: Vec<f64> = f.iter().map(|v| 3.0 * v).collect();
        let w3 = appearance_weight(&f3, &f, &eye, &eye, d).unwrap();
        assert!((w3 - 1.5).abs() < 1e-12);
    }

    fn tiny_params(d_f: usize) -> RelationParams<f64> {
        let mut rng = Rng::new(5);
        RelationParams::init(
            RelationConfig { d_k: 8, d_g: 16, d_f, epsilon_norm: 1e-9 },
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn single_roi_weight_is_one() {
        let p = tiny_params(4);
        let set = RoiFeatureSet {
            features: vec![vec![0.3, -0.2, 0.5, 0.9]],
            geometry: vec![geom(10.0, 10.0, 5.0, 5.0)],
        };
        let w = relation_weights(&set, &p).unwrap();
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn identical_rois_split_evenly() {
        let p = tiny_params(4);
        let f = vec![0.3, -0.2, 0.5, 0.9];
        let set = RoiFeatureSet {
            features: vec![f.clone(), f],
            geometry: vec![geom(10.0, 10.0, 5.0, 5.0); 2],
        };
        let w = relation_weights(&set, &p).unwrap();
        for col in 0..2 {
            assert!((w[col] - 0.5).abs() < 1e-12);
            assert!((w[2 + col] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_two_roi_column() {
        // w_G ≡ {1,1}, w_A = {0, ln 3} → column {1/4, 3/4}.
        let raw = [1.0 * libm::exp(0.0), 1.0 * libm::exp(libm::log(3.0))];
        let s = raw[0] + raw[1];
        assert!((raw[0] / s - 0.25).abs() < 1e-12);
        assert!((raw[1] / s - 0.75).abs() < 1e-12);
    }

    #[test]
    fn zero_value_map_returns_inputs() {
        let mut p = tiny_params(4);
        p.w_v = LinearParam::zeros([4, 4]);
        let set = RoiFeatureSet {
            features: vec![vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.5, 0.0, 2.0]],
            geometry: vec![geom(10.0, 10.0, 5.0, 5.0), geom(30.0, 12.0, 8.0, 4.0)],
        };
        let w = relation_weights(&set, &p).unwrap();
        let fused = relation_features(&set, &w, &p).unwrap();
        assert_eq!(fused, set.features);
    }

    #[test]
    fn single_roi_identity_value_doubles_feature() {
        let mut p = tiny_params(3);
        let mut eye = LinearParam::zeros([3, 3]);
        for i in 0..3 {
            eye.weights[i * 3 + i] = 1.0;
        }
        p.w_v = eye;
        let set = RoiFeatureSet {
            features: vec![vec![0.5, -1.0, 2.0]],
            geometry: vec![geom(5.0, 5.0, 2.0, 2.0)],
        };
        let w = relation_weights(&set, &p).unwrap();
        let fused = relation_features(&set, &w, &p).unwrap();
        assert_eq!(fused[0], vec![1.0, -2.0, 4.0]);
    }

    #[test]
    fn uniform_weights_identity_value_adds_mean() {
        let mut p = tiny_params(2);
        let mut eye = LinearParam::zeros([2, 2]);
        eye.weights[0] = 1.0;
        eye.weights[3] = 1.0;
        p.w_v = eye;
        let set = RoiFeatureSet {
            features: vec![vec![2.0, 0.0], vec![0.0, 4.0]],
            geometry: vec![geom(5.0, 5.0, 2.0, 2.0), geom(9.0, 5.0, 2.0, 2.0)],
        };
        let uniform = vec![0.5, 0.5, 0.5, 0.5];
        let fused = relation_features(&set, &uniform, &p).unwrap();
        // f_R = mean of the two features = [1, 2]
        assert_eq!(fused[0], vec![3.0, 2.0]);
        assert_eq!(fused[1], vec![1.0, 6.0]);
    }

    #[test]
    fn degenerate_geometry_falls_back_to_uniform() {
        let mut p = tiny_params(4);
        p.w_g = vec![0.0; p.config.d_g];
        let set = RoiFeatureSet {
            features: vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0], vec![0.0; 4]],
            geometry: vec![
                geom(10.0, 10.0, 5.0, 5.0),
                geom(30.0, 12.0, 8.0, 4.0),
                geom(50.0, 40.0, 6.0, 9.0),
            ],
        };
        let w = relation_weights(&set, &p).unwrap();
        for v in &w {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_fuse_matches_reference() {
        let p = tiny_params(6);
        let geometry = vec![
            geom(20.0, 30.0, 10.0, 8.0),
            geom(44.0, 28.0, 6.0, 12.0),
            geom(33.0, 52.0, 9.0, 9.0),
        ];
        let mut rng = Rng::new(77);
        let features: Vec<Vec<f64>> =
            (0..3).map(|_| (0..6).map(|_| rng.range_f64(-1.0, 1.0)).collect()).collect();
        let set = RoiFeatureSet { features: features.clone(), geometry: geometry.clone() };

        let w = relation_weights(&set, &p).unwrap();
        let reference = relation_features(&set, &w, &p).unwrap();

        let g: Tape<f64> = Tape::new();
        let staged = p.stage(&g, false).unwrap();
        let flat: Vec<f64> = features.iter().flatten().copied().collect();
        let ft = g.constant(&[3, 6], flat).unwrap();
        let fused = fuse(&g, &staged, ft, &geometry, &p.config).unwrap();
        let got = g.values(fused);
        for (i, row) in reference.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!(
                    (got[i * 6 + j] - v).abs() < 1e-10,
                    "mismatch at ({i},{j}): {} vs {v}",
                    got[i * 6 + j]
                );
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let p = tiny_params(4);
        let geometry = vec![
            geom(20.0, 30.0, 10.0, 8.0),
            geom(44.0, 28.0, 6.0, 12.0),
            geom(33.0, 52.0, 9.0, 9.0),
        ];
        let features =
            vec![vec![0.2, -0.4, 0.1, 0.9], vec![1.2, 0.3, -0.7, 0.0], vec![-0.5, 0.8, 0.6, 0.2]];
        let set = RoiFeatureSet { features: features.clone(), geometry: geometry.clone() };
        let w = relation_weights(&set, &p).unwrap();
        let fused = relation_features(&set, &w, &p).unwrap();

        // permute ROIs by (2, 0, 1)
        let perm = [2usize, 0, 1];
        let pset = RoiFeatureSet {
            features: perm.iter().map(|&i| features[i].clone()).collect(),
            geometry: perm.iter().map(|&i| geometry[i]).collect(),
        };
        let pw = relation_weights(&pset, &p).unwrap();
        let pfused = relation_features(&pset, &pw, &p).unwrap();
        for (new_i, &old_i) in perm.iter().enumerate() {
            for j in 0..4 {
                assert!((pfused[new_i][j] - fused[old_i][j]).abs() < 1e-12);
            }
            for (new_j, &old_j) in perm.iter().enumerate() {
                assert!((pw[new_i * 3 + new_j] - w[old_i * 3 + old_j]).abs() < 1e-12);
            }
        }
    }
}
