//! Versioned JSON checkpoint: model config, named parameters (shape +
//! values), optimizer state and the epoch counter.
//!
//! Values are stored as JSON numbers; with exact float parsing enabled the
//! round trip is bit-lossless for both f32 and f64 models, which is what
//! makes resumed runs reproduce the uninterrupted ones exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sonoqa_core::model::{Model, ModelConfig};
use sonoqa_core::trainer::TrainState;
use sonoqa_core::Real;

use crate::{CliError, CliResult};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> CliResult<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(CliError::Usage(format!("unknown precision '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub velocities: Vec<ParamEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub precision: Precision,
    pub model_config: ModelConfig,
    pub epoch: usize,
    pub params: Vec<ParamEntry>,
    pub optimizer: Option<OptimizerState>,
}

fn collect_params<T: Real>(model: &Model<T>) -> Vec<ParamEntry> {
    let mut shapes = model.param_shapes().into_iter();
    let mut out = Vec::new();
    model.for_each_param(|name, values| {
        let (_, shape) = shapes.next().expect("aligned shape list");
        out.push(ParamEntry {
            name: name.to_string(),
            shape,
            values: values.iter().map(|v| v.to_f64()).collect(),
        });
    });
    out
}

pub fn snapshot<T: Real>(
    model: &Model<T>,
    precision: Precision,
    epoch: usize,
    state: Option<&TrainState<T>>,
) -> Checkpoint {
    let params = collect_params(model);
    let optimizer = state.map(|s| OptimizerState {
        velocities: params
            .iter()
            .zip(&s.velocities)
            .map(|(p, v)| ParamEntry {
                name: p.name.clone(),
                shape: vec![v.len()],
                values: v.iter().map(|x| x.to_f64()).collect(),
            })
            .collect(),
    });
    Checkpoint {
        version: CHECKPOINT_VERSION,
        precision,
        model_config: model.config.clone(),
        epoch,
        params,
        optimizer,
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> CliResult<()> {
    let json = serde_json::to_string(ckpt)
        .map_err(|e| CliError::Data(format!("checkpoint encode: {e}")))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load(path: &Path) -> CliResult<Checkpoint> {
    let raw = fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&raw)
        .map_err(|e| CliError::Data(format!("corrupt checkpoint {}: {e}", path.display())))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(CliError::Data(format!(
            "unsupported checkpoint version {}",
            ckpt.version
        )));
    }
    Ok(ckpt)
}

/// Rebuild a model (and optionally the optimizer state) from a checkpoint.
pub fn restore<T: Real>(ckpt: &Checkpoint) -> CliResult<(Model<T>, Option<TrainState<T>>)> {
    let mut model: Model<T> = Model::init(ckpt.model_config.clone(), 0)?;
    let mut entries = ckpt.params.iter();
    let mut mismatch: Option<String> = None;
    model.for_each_param_mut(|name, values| {
        match entries.next() {
            Some(e) if e.name == name && e.values.len() == values.len() => {
                for (v, &x) in values.iter_mut().zip(&e.values) {
                    *v = T::from_f64(x);
                }
            }
            Some(e) => {
                mismatch.get_or_insert(format!(
                    "parameter {} does not match checkpoint entry {}",
                    name, e.name
                ));
            }
            None => {
                mismatch.get_or_insert(format!("checkpoint is missing parameter {name}"));
            }
        }
    });
    if entries.next().is_some() {
        mismatch.get_or_insert("checkpoint has extra parameters".to_string());
    }
    if let Some(m) = mismatch {
        return Err(CliError::Data(m));
    }
    let state = match &ckpt.optimizer {
        Some(opt) => Some(TrainState {
            velocities: opt
                .velocities
                .iter()
                .map(|e| e.values.iter().map(|&x| T::from_f64(x)).collect())
                .collect(),
            next_epoch: ckpt.epoch,
        }),
        None => None,
    };
    Ok((model, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use sonoqa_core::backbone::FenConfig;
    use sonoqa_core::detector::FpnConfig;
    use sonoqa_core::relation::RelationConfig;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            fen: FenConfig { channel_scale: 128, input_channels: 1 },
            fpn: FpnConfig { channels: 8, ..FpnConfig::default() },
            relation: RelationConfig { d_f: 16, d_k: 4, d_g: 16, epsilon_norm: 1e-9 },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn f32_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let model: Model<f32> = Model::init(toy_config(), 7).unwrap();
        save(&path, &snapshot(&model, Precision::F32, 3, None)).unwrap();
        let (back, state) = restore::<f32>(&load(&path).unwrap()).unwrap();
        assert_eq!(model, back);
        assert!(state.is_none());
    }

    #[test]
    fn optimizer_state_survives_the_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let model: Model<f64> = Model::init(toy_config(), 7).unwrap();
        let mut sizes = Vec::new();
        model.for_each_param(|_, v| sizes.push(v.len()));
        let state = TrainState {
            velocities: sizes.iter().map(|&n| (0..n).map(|i| i as f64 * 0.5).collect()).collect(),
            next_epoch: 2,
        };
        save(&path, &snapshot(&model, Precision::F64, 2, Some(&state))).unwrap();
        let (_, restored) = restore::<f64>(&load(&path).unwrap()).unwrap();
        assert_eq!(restored.unwrap(), state);
    }

    #[test]
    fn corrupt_checkpoint_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        std::fs::write(&path, "{\"version\": 99}").unwrap();
        assert!(matches!(load(&path), Err(CliError::Data(_))));
    }
}
