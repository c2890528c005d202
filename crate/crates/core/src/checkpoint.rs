//! Model persistence: the binary parameter container plus a JSON sidecar
//! carrying everything needed to rebuild and reuse the model (architecture,
//! ablation switches, seed, normalization statistics).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lfnet_autodiff::{container, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::model::{Ablation, BaselineGru, GruConfig, LatencyNet, ModelConfig};

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum ModelSpec {
    Latencynet {
        config: ModelConfig,
        ablation: Ablation,
    },
    Gru {
        config: GruConfig,
    },
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub seed: u64,
    pub normalizer: Normalizer,
}

/// Either trained model behind one loading path.
pub enum AnyModel {
    Latency(LatencyNet),
    Gru(BaselineGru),
}

impl AnyModel {
    pub fn horizon(&self) -> usize {
        match self {
            AnyModel::Latency(m) => m.config.horizon,
            AnyModel::Gru(m) => m.config.horizon,
        }
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        match self {
            AnyModel::Latency(m) => &m.params,
            AnyModel::Gru(m) => &m.params,
        }
    }
}

fn sidecar(path: &Path) -> PathBuf {
    PathBuf::from(format!("{}.json", path.display()))
}

pub fn save_checkpoint(
    path: &Path,
    params: &BTreeMap<String, Tensor>,
    meta: &CheckpointMeta,
) -> Result<()> {
    container::save(path, params)?;
    std::fs::write(sidecar(path), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

/// Load a checkpoint and rebuild its model. The stored parameters must
/// match the architecture in the sidecar name for name and shape for shape.
pub fn load_checkpoint(path: &Path) -> Result<(AnyModel, CheckpointMeta)> {
    let meta_path = sidecar(path);
    let raw = std::fs::read_to_string(&meta_path).map_err(|e| {
        Error::Checkpoint(format!("cannot read sidecar {}: {e}", meta_path.display()))
    })?;
    let meta: CheckpointMeta = serde_json::from_str(&raw)
        .map_err(|e| Error::Checkpoint(format!("bad sidecar {}: {e}", meta_path.display())))?;
    let params = container::load(path)?;

    let mut model = match &meta.spec {
        ModelSpec::Latencynet { config, ablation } => {
            AnyModel::Latency(LatencyNet::new(config.clone(), *ablation, meta.seed)?)
        }
        ModelSpec::Gru { config } => AnyModel::Gru(BaselineGru::new(config.clone(), meta.seed)?),
    };

    {
        let expected = model.params();
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "container has {} tensors, architecture needs {}",
                params.len(),
                expected.len()
            )));
        }
        for (name, tensor) in expected {
            match params.get(name) {
                None => {
                    return Err(Error::Checkpoint(format!("missing parameter {name}")));
                }
                Some(loaded) if loaded.shape() != tensor.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, architecture needs {:?}",
                        loaded.shape(),
                        tensor.shape()
                    )));
                }
                Some(_) => {}
            }
        }
    }
    match &mut model {
        AnyModel::Latency(m) => m.params = params,
        AnyModel::Gru(m) => m.params = params,
    }
    Ok((model, meta))
}
