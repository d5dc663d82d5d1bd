//! Model checkpoints: a JSON manifest holding the architecture, the
//! normaliser, provenance and every named parameter tensor.

use std::path::Path;

use microcast_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::{Normalizer, Scenario};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamStore, Seq2Seq};
use crate::train::Phase;
use crate::transform::{TransformLayer, ZeroShotModel};

pub const FORMAT: &str = "microcast-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config_digest: String,
    pub tool_version: String,
    pub scenario: Scenario,
    pub target_id: String,
    pub seed: u64,
    /// Last training phase completed.
    pub phase: Phase,
    pub backbone_digest: String,
    pub transform_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    model: ModelConfig,
    normalizer: Normalizer,
    source_ids: Vec<String>,
    meta: CheckpointMeta,
    tensors: Vec<TensorRecord>,
}

/// Fills in the digests from `model` and writes the manifest.
pub fn save(path: &Path, model: &ZeroShotModel, meta: &CheckpointMeta) -> Result<CheckpointMeta> {
    let meta = CheckpointMeta {
        backbone_digest: model.backbone_digest(),
        transform_digest: model.transform_digest(),
        ..meta.clone()
    };
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        model: model.config().clone(),
        normalizer: model.normalizer.clone(),
        source_ids: model.source_ids.clone(),
        meta: meta.clone(),
        tensors: model
            .store
            .iter()
            .map(|(name, t)| TensorRecord {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    let text = serde_json::to_string(&manifest)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(meta)
}

pub fn load(path: &Path) -> Result<(ZeroShotModel, CheckpointMeta)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{} is `{}` v{}, expected `{FORMAT}` v{VERSION}",
            path.display(),
            m.format,
            m.version
        )));
    }
    m.model.validate()?;
    let mut store = ParamStore::new();
    for r in m.tensors {
        let t = Tensor::new(r.shape, r.data)
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", r.name)))?;
        store.insert(&r.name, t)?;
    }
    let backbone = Seq2Seq::bind(m.model.clone(), &store)?;
    let transform = TransformLayer::bind(&store, m.model.d_model, m.source_ids.len())?;
    let model = ZeroShotModel {
        backbone,
        transform,
        store,
        normalizer: m.normalizer,
        source_ids: m.source_ids,
    };
    if model.backbone_digest() != m.meta.backbone_digest
        || model.transform_digest() != m.meta.transform_digest
    {
        return Err(Error::Checkpoint(format!(
            "{}: parameter digests do not match the recorded ones",
            path.display()
        )));
    }
    Ok((model, m.meta))
}
