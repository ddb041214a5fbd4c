//! The assembled multi-task model and its configuration.
//!
//! A model owns the raw parameters of the feature extractor, the pyramid
//! projections, the proposal head and the class-prediction head. Each
//! forward pass stages them onto a fresh tape; the optimizer and the
//! checkpoint format address them through the stable names produced by
//! [`Model::for_each_param`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::{build_fen, FeatureExtractor, FenConfig, FenTensors};
use crate::classifier::{CpnConfig, CpnParams, CpnTensors};
use crate::detector::{FpnConfig, FpnParams, FpnTensors, RpnParams, RpnTensors};
use crate::error::Result;
use crate::real::Real;
use crate::relation::RelationConfig;
use crate::rng::Rng;
use crate::tensor::Tape;

/// Preprocessing applied before feature extraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub sigma: f64,
    /// Overlay-text threshold; phantom intensities stay below it.
    pub strip_threshold: f64,
    pub border_band_fraction: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            sigma: crate::preprocess::DEFAULT_SIGMA,
            strip_threshold: 0.98,
            border_band_fraction: crate::preprocess::DEFAULT_BORDER_BAND_FRACTION,
        }
    }
}

/// Reduction of detections into per-structure verdicts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssessConfig {
    /// Detections below this confidence do not count as found.
    pub min_confidence: f64,
    /// Sigmoid cutoff of the quality head.
    pub quality_cutoff: f64,
}

impl Default for AssessConfig {
    fn default() -> Self {
        AssessConfig { min_confidence: 0.25, quality_cutoff: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct ModelConfig {
    pub fen: FenConfig,
    pub fpn: FpnConfig,
    pub relation: RelationConfig,
    pub cpn: CpnConfig,
    pub preprocess: PreprocessConfig,
    pub assess: AssessConfig,
}


impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.fen.stage_channels()?;
        self.fpn.validate()?;
        self.relation.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub fen: FeatureExtractor<T>,
    pub fpn: FpnParams<T>,
    pub rpn: RpnParams<T>,
    pub cpn: CpnParams<T>,
}

impl<T: Real> Model<T> {
    /// Deterministic initialization from a seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model<T>> {
        config.validate()?;
        let widths = config.fen.stage_channels()?;
        let fen = build_fen(config.fen, seed)?;
        let mut rng = Rng::new(seed).fork(0x0d_e7);
        let fpn = FpnParams::init([widths[2], widths[3], widths[4]], config.fpn.channels, &mut rng);
        let rpn = RpnParams::init(config.fpn.channels, config.fpn.anchors_per_location(), &mut rng);
        let cpn = CpnParams::init(config.cpn.clone(), config.relation, config.fpn.channels, &mut rng)?;
        Ok(Model { config, fen, fpn, rpn, cpn })
    }

    /// Visit every parameter vector with a stable name, in a stable order.
    pub fn for_each_param(&self, mut f: impl FnMut(&str, &[T])) {
        self.visit(|name, values| f(name, values));
    }

    /// Mutable variant of [`Model::for_each_param`]; same names, same order.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut Vec<T>)) {
        // keep in lockstep with visit()
        for (i, s) in self.fen.stages.iter_mut().enumerate() {
            f(&format!("fen.stage{i}.conv.w"), &mut s.conv.weights);
            f(&format!("fen.stage{i}.conv.b"), &mut s.conv.bias);
            f(&format!("fen.stage{i}.proj.w"), &mut s.proj.weights);
            f(&format!("fen.stage{i}.proj.b"), &mut s.proj.bias);
        }
        for (i, l) in self.fpn.lateral.iter_mut().enumerate() {
            f(&format!("fpn.lateral{i}.w"), &mut l.weights);
            f(&format!("fpn.lateral{i}.b"), &mut l.bias);
        }
        f("fpn.down6.w", &mut self.fpn.down6.weights);
        f("fpn.down6.b", &mut self.fpn.down6.bias);
        f("fpn.down7.w", &mut self.fpn.down7.weights);
        f("fpn.down7.b", &mut self.fpn.down7.bias);
        f("rpn.conv.w", &mut self.rpn.conv.weights);
        f("rpn.conv.b", &mut self.rpn.conv.bias);
        f("rpn.obj.w", &mut self.rpn.objectness.weights);
        f("rpn.obj.b", &mut self.rpn.objectness.bias);
        f("rpn.delta.w", &mut self.rpn.deltas.weights);
        f("rpn.delta.b", &mut self.rpn.deltas.bias);
        f("cpn.proj.w", &mut self.cpn.proj.weights);
        f("cpn.proj.b", &mut self.cpn.proj.bias);
        f("cpn.relation.w_g", &mut self.cpn.relation.w_g);
        f("cpn.relation.w_k", &mut self.cpn.relation.w_k.weights);
        f("cpn.relation.w_q", &mut self.cpn.relation.w_q.weights);
        f("cpn.relation.w_v", &mut self.cpn.relation.w_v.weights);
        f("cpn.class.w", &mut self.cpn.class_head.weights);
        f("cpn.class.b", &mut self.cpn.class_head.bias);
        f("cpn.quality.w", &mut self.cpn.quality_head.weights);
        f("cpn.quality.b", &mut self.cpn.quality_head.bias);
    }

    fn visit(&self, mut f: impl FnMut(&str, &[T])) {
        for (i, s) in self.fen.stages.iter().enumerate() {
            f(&format!("fen.stage{i}.conv.w"), &s.conv.weights);
            f(&format!("fen.stage{i}.conv.b"), &s.conv.bias);
            f(&format!("fen.stage{i}.proj.w"), &s.proj.weights);
            f(&format!("fen.stage{i}.proj.b"), &s.proj.bias);
        }
        for (i, l) in self.fpn.lateral.iter().enumerate() {
            f(&format!("fpn.lateral{i}.w"), &l.weights);
            f(&format!("fpn.lateral{i}.b"), &l.bias);
        }
        f("fpn.down6.w", &self.fpn.down6.weights);
        f("fpn.down6.b", &self.fpn.down6.bias);
        f("fpn.down7.w", &self.fpn.down7.weights);
        f("fpn.down7.b", &self.fpn.down7.bias);
        f("rpn.conv.w", &self.rpn.conv.weights);
        f("rpn.conv.b", &self.rpn.conv.bias);
        f("rpn.obj.w", &self.rpn.objectness.weights);
        f("rpn.obj.b", &self.rpn.objectness.bias);
        f("rpn.delta.w", &self.rpn.deltas.weights);
        f("rpn.delta.b", &self.rpn.deltas.bias);
        f("cpn.proj.w", &self.cpn.proj.weights);
        f("cpn.proj.b", &self.cpn.proj.bias);
        f("cpn.relation.w_g", &self.cpn.relation.w_g);
        f("cpn.relation.w_k", &self.cpn.relation.w_k.weights);
        f("cpn.relation.w_q", &self.cpn.relation.w_q.weights);
        f("cpn.relation.w_v", &self.cpn.relation.w_v.weights);
        f("cpn.class.w", &self.cpn.class_head.weights);
        f("cpn.class.b", &self.cpn.class_head.bias);
        f("cpn.quality.w", &self.cpn.quality_head.weights);
        f("cpn.quality.b", &self.cpn.quality_head.bias);
    }

    /// Parameter shapes by name (for checkpoint validation).
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut shapes: Vec<(String, usize)> = Vec::new();
        self.visit(|name, values| shapes.push((String::from(name), values.len())));
        for (name, len) in shapes {
            out.push((name, alloc::vec![len]));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, v| n += v.len());
        n
    }

    pub fn stage(&self, g: &Tape<T>, trainable: bool) -> Result<ModelTensors> {
        Ok(ModelTensors {
            fen: self.fen.stage(g, trainable)?,
            fpn: self.fpn.stage(g, trainable)?,
            rpn: self.rpn.stage(g, trainable)?,
            cpn: self.cpn.stage(g, trainable)?,
        })
    }

    /// Convert parameters to another precision (f64 mirrors an f32 model
    /// exactly; the reverse rounds).
    pub fn convert<U: Real>(&self) -> Result<Model<U>> {
        let mut target: Model<U> = Model::init(self.config.clone(), 0)?;
        let mut flat: Vec<Vec<U>> = Vec::new();
        self.visit(|_, values| {
            flat.push(values.iter().map(|v| U::from_f64(v.to_f64())).collect())
        });
        let mut it = flat.into_iter();
        target.for_each_param_mut(|_, v| {
            *v = it.next().expect("same parameter structure");
        });
        Ok(target)
    }
}

/// All parameters staged onto one tape.
pub struct ModelTensors {
    pub fen: FenTensors,
    pub fpn: FpnTensors,
    pub rpn: RpnTensors,
    pub cpn: CpnTensors,
}

impl ModelTensors {
    /// Staged tensors in the order [`Model::for_each_param`] visits the raw
    /// parameters (the optimizer relies on this alignment; a test pins it).
    pub fn param_tensors(&self) -> Vec<crate::tensor::Tensor> {
        let mut out = Vec::new();
        for ((cw, cb), (pw, pb)) in &self.fen.stages {
            out.extend([*cw, *cb, *pw, *pb]);
        }
        for (w, b) in &self.fpn.lateral {
            out.extend([*w, *b]);
        }
        out.extend([self.fpn.down6.0, self.fpn.down6.1, self.fpn.down7.0, self.fpn.down7.1]);
        out.extend([
            self.rpn.conv.0,
            self.rpn.conv.1,
            self.rpn.objectness.0,
            self.rpn.objectness.1,
            self.rpn.deltas.0,
            self.rpn.deltas.1,
        ]);
        out.extend([self.cpn.proj.0, self.cpn.proj.1]);
        out.extend([
            self.cpn.relation.w_g,
            self.cpn.relation.w_k,
            self.cpn.relation.w_q,
            self.cpn.relation.w_v,
        ]);
        out.extend([
            self.cpn.class_head.0,
            self.cpn.class_head.1,
            self.cpn.quality_head.0,
            self.cpn.quality_head.1,
        ]);
        out
    }
}

/// Apply the configured preprocessing (overlay-text removal, then Gaussian
/// smoothing) ahead of feature extraction.
pub fn prepare_image(cfg: &PreprocessConfig, image: &crate::preprocess::GrayImage) -> Result<crate::preprocess::GrayImage> {
    let band = libm::ceil(
        image.width().min(image.height()) as f64 * cfg.border_band_fraction,
    ) as usize;
    let stripped = crate::preprocess::strip_overlay_text(image, cfg.strip_threshold, band)?;
    let kernel = crate::preprocess::gaussian_kernel(
        cfg.sigma,
        crate::preprocess::default_radius(cfg.sigma),
    )?;
    Ok(crate::preprocess::smooth(&stripped, &kernel))
}
