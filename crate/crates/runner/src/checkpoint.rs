use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lesionbench_nn::{build_model, Model, ParamStore};

use crate::config::ExperimentConfig;
use crate::error::{io, Result, RunnerError};

pub const FORMAT_VERSION: u32 = 1;

/// Trained weights together with everything needed to rebuild and run them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ExperimentConfig,
    /// Zero-based epoch after which the weights were taken.
    pub epoch: usize,
    pub val_dice: Option<f64>,
    pub class_ratios: Option<Vec<f64>>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(config: ExperimentConfig, model: &Model, epoch: usize, val_dice: Option<f64>, class_ratios: Option<Vec<f64>>) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            config,
            epoch,
            val_dice,
            class_ratios,
            params: model.params().clone(),
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("checkpoint serialises")
    }

    /// First 12 hex digits of the SHA-256 of the serialised checkpoint.
    pub fn id(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        hex::encode(&digest[..6])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io(dir))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io(path))?;
        let json = |source| RunnerError::Json {
            path: path.to_path_buf(),
            source,
        };
        let header: serde_json::Value = serde_json::from_slice(&bytes).map_err(json)?;
        let found = header.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != FORMAT_VERSION {
            return Err(RunnerError::CheckpointVersion {
                found,
                expected: FORMAT_VERSION,
            });
        }
        serde_json::from_value(header).map_err(json)
    }

    /// Rebuild the architecture and load the stored weights.
    pub fn model(&self) -> Result<Model> {
        let mut model = build_model(&self.config.model, self.config.seed)?;
        model.params_mut().load_from(&self.params)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lesionbench_nn::{Arch, ModelConfig, Tensor};

    #[test]
    fn save_load_is_lossless() {
        let config = ExperimentConfig {
            model: ModelConfig {
                base_width: 2,
                depth: 2,
                ..ModelConfig::new(Arch::VNet)
            },
            ..ExperimentConfig::default()
        };
        let model = build_model(&config.model, 7).unwrap();
        let ck = Checkpoint::new(config, &model, 3, Some(0.25), Some(vec![0.99, 0.01]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/best.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.id(), ck.id());
        assert_eq!(ck.id().len(), 12);
        let x = Tensor::from_fn([1, 1, 4, 4, 4], |i| i[4] as f64);
        assert_eq!(back.model().unwrap().forward(x.clone()).unwrap(), model.forward(x).unwrap());
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("old.json");
        std::fs::write(&path, r#"{"format_version": 0}"#).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(RunnerError::CheckpointVersion { found: 0, expected: FORMAT_VERSION })
        ));
    }
}
