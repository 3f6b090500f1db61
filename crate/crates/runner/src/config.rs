use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lesionbench_core::augment::AugmentConfig;
use lesionbench_core::losses::LossConfig;
use lesionbench_core::preprocess::CropSpec;
use lesionbench_core::sampling::{PatchSpec, Sampler};
use lesionbench_nn::{AdamConfig, ModelConfig};

use crate::error::{io, Result, RunnerError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Only `adam` is implemented.
    pub name: String,
    pub learning_rate: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            name: "adam".into(),
            learning_rate: AdamConfig::default().learning_rate,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> Result<AdamConfig> {
        if self.name != "adam" {
            return Err(RunnerError::Config(format!("unknown optimizer {:?}", self.name)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(RunnerError::Config("learning_rate must be positive".into()));
        }
        Ok(AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        })
    }
}

/// Applied to every case when it is loaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Crop (or pad) to this extent around the brain before normalising.
    pub crop: Option<CropSpec>,
    pub zscore: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { crop: None, zscore: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub model: ModelConfig,
    pub sampler: Sampler,
    pub patch: PatchSpec,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub optimizer: OptimizerConfig,
    pub preprocess: PreprocessConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Share of the training split held out for checkpoint selection.
    pub val_fraction: f64,
    /// Upper bound on the estimated training activation footprint.
    pub memory_budget_mb: Option<usize>,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: PathBuf::from("manifest.csv"),
            model: ModelConfig::default(),
            sampler: Sampler::ThreeDim,
            patch: PatchSpec::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            optimizer: OptimizerConfig::default(),
            preprocess: PreprocessConfig::default(),
            batch_size: 1,
            epochs: 10,
            seed: 0,
            val_fraction: 0.1,
            memory_budget_mb: Some(16 * 1024),
            checkpoint_dir: PathBuf::from("checkpoints"),
            output_dir: PathBuf::from("output"),
        }
    }
}

impl ExperimentConfig {
    /// Read YAML; relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io(path))?;
        let mut cfg: ExperimentConfig = serde_yaml::from_str(&text).map_err(|source| RunnerError::Yaml {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset, &mut cfg.checkpoint_dir, &mut cfg.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_yaml::to_string(self).map_err(|source| RunnerError::Yaml {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, text).map_err(io(path))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        self.optimizer.adam()?;
        let three_d = self.model.arch.is_3d();
        let ok = match self.sampler {
            Sampler::TwoDim => !three_d,
            Sampler::ThreeDim | Sampler::UniformPatch | Sampler::CenterPatch => three_d,
        };
        if !ok {
            return Err(RunnerError::Config(format!(
                "sampler {} cannot feed {} ({} model)",
                self.sampler.key(),
                self.model.arch,
                if three_d { "3D" } else { "2D" }
            )));
        }
        if self.sampler.is_patch() {
            self.model.check_input(self.patch.size).map_err(|e| {
                RunnerError::Config(format!("patch size {:?} does not suit the model: {e}", self.patch.size))
            })?;
        }
        if self.batch_size == 0 {
            return Err(RunnerError::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(RunnerError::Config("val_fraction must lie in [0, 1)".into()));
        }
        if self.model.num_classes > u8::MAX as usize {
            return Err(RunnerError::Config("num_classes must fit in a byte".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> u8 {
        self.model.num_classes as u8
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lesionbench_nn::Arch;

    #[test]
    fn yaml_round_trip_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.yaml");
        std::fs::write(
            &path,
            "dataset: data/manifest.csv\nmodel:\n  arch: v_net\n  base_width: 4\nsampler: center_patch\npatch:\n  size: [16, 16, 16]\nloss:\n  kind: weighted_ce\nepochs: 3\n",
        )
        .unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.model.arch, Arch::VNet);
        assert_eq!(cfg.model.base_width, 4);
        assert_eq!(cfg.sampler, Sampler::CenterPatch);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.dataset, dir.path().join("data/manifest.csv"));
        assert_eq!(cfg.optimizer.learning_rate, 1e-4);
        let out = dir.path().join("again.yaml");
        cfg.save(&out).unwrap();
        assert_eq!(ExperimentConfig::load(&out).unwrap().model, cfg.model);
    }

    #[test]
    fn rejects_mismatched_sampler_and_model() {
        let cfg = ExperimentConfig {
            model: ModelConfig::new(Arch::UNet),
            sampler: Sampler::ThreeDim,
            ..ExperimentConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(RunnerError::Config(_))));
        let cfg = ExperimentConfig {
            model: ModelConfig::new(Arch::VNet),
            sampler: Sampler::TwoDim,
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig {
            sampler: Sampler::UniformPatch,
            patch: PatchSpec {
                size: [18, 16, 16],
                ..PatchSpec::default()
            },
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_optimizer_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.optimizer.name = "sgd".into();
        assert!(cfg.validate().is_err());
    }
}
