//! JSON checkpoint container: model config plus named parameter tensors.
//!
//! ```json
//! {
//!   "format": "sormamba-checkpoint",
//!   "version": 1,
//!   "stage": "pretrain-ccm",
//!   "parent": "runs/a/model.json",
//!   "config": { ...ModelConfig... },
//!   "params": [{ "name": "embed.weight", "shape": [96, 128], "data": [...] }]
//! }
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SorMamba};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT: &str = "sormamba-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Training stage that produced the parameters, e.g. `supervised`.
    pub stage: String,
    /// Checkpoint this one was initialized from.
    pub parent: Option<String>,
    pub config: ModelConfig,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &SorMamba, stage: &str, parent: Option<String>) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            stage: stage.into(),
            parent,
            config: model.config.clone(),
            params: model
                .params
                .iter()
                .map(|(_, name, t)| NamedTensor {
                    name: name.into(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model; every stored parameter must match by name and shape.
    pub fn to_model(&self) -> Result<SorMamba> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut model = SorMamba::new(self.config.clone(), 0)?;
        let mut store = ParamStore::new();
        for p in &self.params {
            store.add(p.name.clone(), Tensor::new(p.shape.clone(), p.data.clone())?);
        }
        if store.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                store.len()
            )));
        }
        model.params.load_from(&store)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let cfg = ModelConfig {
            lookback: 5,
            horizon: 2,
            channels: 3,
            d_model: 4,
            layers: 1,
            d_state: 2,
            ..ModelConfig::default()
        };
        let m = SorMamba::new(cfg, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        Checkpoint::from_model(&m, "supervised", None).save(&path).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.stage, "supervised");
        let back = ck.to_model().unwrap();
        assert_eq!(back.params, m.params);
        let mut bad = ck.clone();
        bad.params.pop();
        assert!(bad.to_model().is_err());
        let mut bad = ck;
        bad.version = 9;
        assert!(bad.to_model().is_err());
    }
}
