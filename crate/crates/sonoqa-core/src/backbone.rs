//! Feature extraction network: five stride-2 residual stages.
//!
//! Each stage is relu(conv3×3, stride 2, pad 1) plus a 1×1 stride-2
//! projection of its input (the skip path), so spatial extents halve
//! exactly on even inputs and stage s of an H×H image is H/2^s square.
//! Global average pooling and spatial pyramid pooling are exposed here as
//! the pooling surface of the extractor; SPP follows He et al., "Spatial
//! Pyramid Pooling in Deep Convolutional Networks" (2015).

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ConvParam;
use crate::preprocess::GrayImage;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

/// Full-scale stage widths; desk-scale runs divide them by `channel_scale`.
pub const BASE_CHANNELS: [usize; 5] = [128, 256, 512, 1024, 2048];
pub const STAGE_KERNEL: usize = 3;
pub const STAGE_STRIDE: usize = 2;
pub const STAGE_PADDING: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FenConfig {
    /// Uniform divisor applied to [`BASE_CHANNELS`]; 1 reproduces the full
    /// widths, 16 is the desk-scale default.
    pub channel_scale: usize,
    pub input_channels: usize,
}

impl Default for FenConfig {
    fn default() -> Self {
        FenConfig { channel_scale: 16, input_channels: 1 }
    }
}

impl FenConfig {
    /// Stage widths after scaling; every width must stay a positive integer.
    pub fn stage_channels(&self) -> Result<[usize; 5]> {
        if self.channel_scale == 0 || self.input_channels == 0 {
            return Err(Error::Config(
                "channel_scale and input_channels must be positive".into(),
            ));
        }
        let mut out = [0usize; 5];
        for (o, &base) in out.iter_mut().zip(&BASE_CHANNELS) {
            if base % self.channel_scale != 0 {
                return Err(Error::Config(format!(
                    "channel_scale {} does not divide stage width {base}",
                    self.channel_scale
                )));
            }
            *o = base / self.channel_scale;
        }
        Ok(out)
    }
}

/// One residual stage: main 3×3 stride-2 conv and 1×1 stride-2 projection.
#[derive(Debug, Clone, PartialEq)]
pub struct StageParams<T: Real> {
    pub conv: ConvParam<T>,
    pub proj: ConvParam<T>,
}

/// The feature extractor's parameters. Read-only during inference;
/// concurrent extract calls on one extractor are safe.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor<T: Real> {
    pub config: FenConfig,
    pub stages: Vec<StageParams<T>>,
}

/// Deterministic Glorot initialization from a seed.
pub fn build_fen<T: Real>(config: FenConfig, seed: u64) -> Result<FeatureExtractor<T>> {
    let widths = config.stage_channels()?;
    let mut rng = Rng::new(seed).fork(0x0f_e2);
    let mut stages = Vec::with_capacity(5);
    let mut c_in = config.input_channels;
    for &c_out in &widths {
        stages.push(StageParams {
            conv: ConvParam::init([c_out, c_in, STAGE_KERNEL, STAGE_KERNEL], &mut rng),
            proj: ConvParam::init([c_out, c_in, 1, 1], &mut rng),
        });
        c_in = c_out;
    }
    Ok(FeatureExtractor { config, stages })
}

impl<T: Real> FeatureExtractor<T> {
    pub fn param_count(&self) -> usize {
        self.stages
            .iter()
            .map(|s| {
                s.conv.weights.len()
                    + s.conv.bias.len()
                    + s.proj.weights.len()
                    + s.proj.bias.len()
            })
            .sum()
    }

    pub fn stage(&self, g: &Tape<T>, trainable: bool) -> Result<FenTensors> {
        let stages = self
            .stages
            .iter()
            .map(|s| Ok((s.conv.stage(g, trainable)?, s.proj.stage(g, trainable)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(FenTensors { stages })
    }
}

/// Staged (on-tape) extractor parameters.
pub struct FenTensors {
    pub stages: Vec<((Tensor, Tensor), (Tensor, Tensor))>,
}

/// Load a grayscale image as a [1, H, W] constant.
pub fn image_tensor<T: Real>(g: &Tape<T>, image: &GrayImage) -> Result<Tensor> {
    let values: Vec<T> = image.data().iter().map(|&v| T::from_f64(v)).collect();
    g.constant(&[1, image.height(), image.width()], values)
}

/// Run the five stages and return every stage map C1..C5.
///
/// The image must be at least 32 px and divisible by 32 on each side so the
/// extents halve exactly through all five stages.
pub fn extract<T: Real>(g: &Tape<T>, fen: &FenTensors, image: Tensor) -> Result<Vec<Tensor>> {
    let shape = g.shape(image);
    let (h, w) = match shape.as_slice() {
        [_, h, w] => (*h, *w),
        s => return Err(Error::Input(format!("extractor input must be [C,H,W], got {s:?}"))),
    };
    if h < 32 || w < 32 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Input(format!(
            "image extents must be ≥ 32 and divisible by 32, got {w}×{h}"
        )));
    }
    let mut maps = Vec::with_capacity(5);
    let mut x = image;
    for (conv, proj) in &fen.stages {
        let main = g.relu(g.conv2d(x, conv.0, conv.1, STAGE_STRIDE, STAGE_PADDING)?)?;
        let skip = g.conv2d(x, proj.0, proj.1, STAGE_STRIDE, 0)?;
        x = g.add(main, skip)?;
        maps.push(x);
    }
    Ok(maps)
}

/// Per-channel mean over the spatial extent.
pub fn global_avg_pool<T: Real>(g: &Tape<T>, map: Tensor) -> Result<Tensor> {
    g.global_avg_pool(map)
}

/// Default pyramid grids: four sub-maps from 1×1 up to 16×16.
pub const DEFAULT_SPP_LEVELS: [usize; 4] = [1, 2, 4, 16];

/// Fixed-length pyramid pooling; see [`Tape::spp`].
pub fn spp<T: Real>(g: &Tape<T>, map: Tensor, levels: &[usize]) -> Result<Tensor> {
    g.spp(map, levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn default_scale_one_widths_match_table() {
        let cfg = FenConfig { channel_scale: 1, input_channels: 1 };
        assert_eq!(cfg.stage_channels().unwrap(), [128, 256, 512, 1024, 2048]);
    }

    #[test]
    fn scale_sixteen_widths() {
        let cfg = FenConfig::default();
        assert_eq!(cfg.stage_channels().unwrap(), [8, 16, 32, 64, 128]);
    }

    #[test]
    fn non_dividing_scale_is_config_error() {
        let cfg = FenConfig { channel_scale: 7, input_channels: 1 };
        assert!(matches!(cfg.stage_channels(), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let cfg = FenConfig { channel_scale: 128, input_channels: 1 };
        let a: FeatureExtractor<f64> = build_fen(cfg, 9).unwrap();
        let b: FeatureExtractor<f64> = build_fen(cfg, 9).unwrap();
        assert_eq!(a, b);
        let c: FeatureExtractor<f64> = build_fen(cfg, 10).unwrap();
        assert_ne!(a, c);
    }

    fn extract_shapes(size: usize) -> Vec<Vec<usize>> {
        let cfg = FenConfig { channel_scale: 128, input_channels: 1 };
        let fen: FeatureExtractor<f64> = build_fen(cfg, 3).unwrap();
        let g = Tape::new();
        let staged = fen.stage(&g, false).unwrap();
        let img = GrayImage::filled(size, size, 0.5).unwrap();
        let maps = extract(&g, &staged, image_tensor(&g, &img).unwrap()).unwrap();
        maps.iter().map(|&m| g.shape(m)).collect()
    }

    #[test]
    fn stage_extents_halve_to_c5() {
        let shapes = extract_shapes(256);
        assert_eq!(shapes[4], vec![16, 8, 8]);
        assert_eq!(shapes[0], vec![1, 128, 128]);
    }

    #[test]
    fn doubling_input_doubles_every_map() {
        let small = extract_shapes(64);
        let large = extract_shapes(128);
        for (s, l) in small.iter().zip(&large) {
            assert_eq!(s[0], l[0]);
            assert_eq!(2 * s[1], l[1]);
            assert_eq!(2 * s[2], l[2]);
        }
    }

    #[test]
    fn undersized_image_is_input_error() {
        let cfg = FenConfig { channel_scale: 128, input_channels: 1 };
        let fen: FeatureExtractor<f64> = build_fen(cfg, 3).unwrap();
        let g = Tape::new();
        let staged = fen.stage(&g, false).unwrap();
        let img = GrayImage::filled(16, 16, 0.5).unwrap();
        let r = extract(&g, &staged, image_tensor(&g, &img).unwrap());
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn zero_main_convs_leave_projection_chain() {
        // With the main convs zeroed (projections untouched) every stage
        // output must equal the projected input chain exactly.
        let cfg = FenConfig { channel_scale: 128, input_channels: 1 };
        let mut fen: FeatureExtractor<f64> = build_fen(cfg, 3).unwrap();
        for s in &mut fen.stages {
            s.conv.weights.iter_mut().for_each(|w| *w = 0.0);
            s.conv.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let g = Tape::new();
        let staged = fen.stage(&g, false).unwrap();
        let mut rng = Rng::new(4);
        let img = GrayImage::new(32, 32, (0..1024).map(|_| rng.next_f64()).collect()).unwrap();
        let maps = extract(&g, &staged, image_tensor(&g, &img).unwrap()).unwrap();

        // independently apply only the projection chain
        let g2: Tape<f64> = Tape::new();
        let mut x = image_tensor(&g2, &img).unwrap();
        for (i, s) in fen.stages.iter().enumerate() {
            let w = g2.constant(&s.proj.shape, s.proj.weights.clone()).unwrap();
            let b = g2.constant(&[s.proj.shape[0]], s.proj.bias.clone()).unwrap();
            x = g2.conv2d(x, w, b, STAGE_STRIDE, 0).unwrap();
            assert_eq!(g.values(maps[i]), g2.values(x), "stage {i}");
        }
    }

    #[test]
    fn extract_is_deterministic() {
        let cfg = FenConfig { channel_scale: 128, input_channels: 1 };
        let fen: FeatureExtractor<f64> = build_fen(cfg, 11).unwrap();
        let mut rng = Rng::new(8);
        let img = GrayImage::new(32, 32, (0..1024).map(|_| rng.next_f64()).collect()).unwrap();
        let run = || {
            let g = Tape::new();
            let staged = fen.stage(&g, false).unwrap();
            let maps = extract(&g, &staged, image_tensor(&g, &img).unwrap()).unwrap();
            g.values(maps[4])
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gap_never_exceeds_spp_level1() {
        let g: Tape<f64> = Tape::new();
        let mut rng = Rng::new(21);
        let m = g
            .constant(&[3, 6, 6], (0..108).map(|_| rng.range_f64(-1.0, 1.0)).collect())
            .unwrap();
        let mean = g.values(global_avg_pool(&g, m).unwrap());
        let max = g.values(spp(&g, m, &[1]).unwrap());
        for (a, b) in mean.iter().zip(&max) {
            assert!(a <= b);
        }
    }
}
