//! Checkpoint files: named little-endian `f32` tensors with their shapes, plus
//! the model configuration as embedded JSON.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::{ParamTensor, ParameterSet};

const HEADER_KEY: &str = "ideolens";
const FORMAT: &str = "ideolens-checkpoint-v1";

/// Embedded header. A single metadata entry keeps the file bytes
/// independent of map iteration order.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    model_config: ModelConfig,
    final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Loss of the last optimization step that produced these parameters.
    pub final_loss: Option<f64>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payloads: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .model
            .params
            .iter()
            .map(|(name, t)| (name.clone(), t.shape().to_vec(), t.data().iter().flat_map(|v| v.to_le_bytes()).collect()))
            .collect();
        let views = payloads
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes).map(|v| (name.as_str(), v)).map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let header = Header { format: FORMAT.into(), model_config: self.model.config.clone(), final_loss: self.final_loss };
        let meta = HashMap::from([(HEADER_KEY.to_string(), serde_json::to_string(&header)?)]);
        safetensors::serialize(views, &Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |e: safetensors::SafeTensorError| Error::Checkpoint(e.to_string());
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(bad)?;
        let text = header.metadata().as_ref().and_then(|m| m.get(HEADER_KEY)).ok_or_else(|| Error::Checkpoint("missing header".into()))?;
        let header: Header = serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", header.format)));
        }
        let tensors = SafeTensors::deserialize(bytes).map_err(bad)?;
        let mut params = ParameterSet::new();
        for (name, view) in tensors.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!("tensor {name} has dtype {:?}, expected F32", view.dtype())));
            }
            let data = view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = ParamTensor::new(view.shape().to_vec(), data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            params.insert(name, t);
        }
        Ok(Self { model: Model::from_parts(header.model_config, params)?, final_loss: header.final_loss })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionMethod;
    use crate::model::ModelKind;

    fn model() -> Model {
        let mut cfg = ModelConfig::default();
        cfg.kind = ModelKind::Multimodal;
        cfg.fusion.method = FusionMethod::Gated;
        cfg.text.d_model = 16;
        cfg.text.n_layers = 1;
        cfg.text.vocab_size = 64;
        cfg.text.max_seq_len = 16;
        cfg.image.resolution = 16;
        cfg.image.d_model = 8;
        cfg.image.window_size = 2;
        cfg.fusion.d_joint = 8;
        Model::init(cfg, 9).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = Checkpoint { model: model(), final_loss: Some(0.123456789) };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.model.params.digest(), ck.model.params.digest());
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn fusion_parameters_are_prefixed() {
        let ck = Checkpoint { model: model(), final_loss: None };
        let bytes = ck.to_bytes().unwrap();
        let names: Vec<String> = SafeTensors::deserialize(&bytes).unwrap().names().into_iter().cloned().collect();
        assert!(names.iter().any(|n| n == "fusion/gate/weight"));
        assert!(names.iter().any(|n| n == "fusion/out/weight"));
    }

    #[test]
    fn corrupt_or_mismatched_files_are_rejected() {
        assert!(matches!(Checkpoint::from_bytes(b"not a checkpoint"), Err(Error::Checkpoint(_))));
        let mut ck = Checkpoint { model: model(), final_loss: None };
        ck.model.params.insert("stray", ParamTensor::zeros(vec![2]));
        assert!(matches!(Checkpoint::from_bytes(&ck.to_bytes().unwrap()), Err(Error::Checkpoint(_))));
    }
}
