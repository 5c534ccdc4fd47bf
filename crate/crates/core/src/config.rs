//! Experiment configuration, stored as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::{EncoderConfig, TrainingConfig};
use crate::diffusion::DiffusionConfig;
use crate::error::{LgdError, Result};
use crate::graph::{DatasetSpec, MaskTargets};
use crate::nn::{ConditioningMode, DenoiserConfig};
use crate::params::OptimizerConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Unconditional generation; the denoiser must be unconditional.
    #[default]
    Generation,
    /// Predict the masked graph attribute.
    GraphRegression,
}

impl Task {
    pub fn mask_targets(self) -> MaskTargets {
        match self {
            Task::Generation => MaskTargets::default(),
            Task::GraphRegression => MaskTargets::graph_only(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Defaults to `<output_dir>/autoencoder.ckpt`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub autoencoder: Option<PathBuf>,
    /// Defaults to `<output_dir>/denoiser.ckpt`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub denoiser: Option<PathBuf>,
    /// Graphs scored by `evaluate`; defaults to `<output_dir>/samples.jsonl`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub count: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { count: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    pub ddim_steps: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Tolerance band of the step sweep as a fraction of the label std.
    pub band_fraction: f64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            ddim_steps: vec![5, 20, 100],
            seeds: vec![0, 1, 2, 3, 4],
            band_fraction: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// 32 rounds trained parameters through f32; 64 keeps full precision.
    #[serde(default = "default_precision")]
    pub precision: u32,
    #[serde(default = "default_device")]
    pub device: String,
    #[serde(default)]
    pub task: Task,
    pub dataset: DatasetSpec,
    /// Held-out graphs for `predict` and `theory`; the training set if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default = "default_training")]
    pub ae_training: TrainingConfig,
    #[serde(default)]
    pub denoiser: DenoiserConfig,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default = "default_training")]
    pub diffusion_training: TrainingConfig,
    #[serde(default)]
    pub sample: SampleConfig,
    #[serde(default)]
    pub theory: TheoryConfig,
    #[serde(default)]
    pub paths: Paths,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}
fn default_precision() -> u32 {
    32
}
fn default_device() -> String {
    "cpu".into()
}

/// Batch 256, step size 1e-4 with cosine decay after a short warmup.
pub fn default_training() -> TrainingConfig {
    TrainingConfig {
        steps: 1000,
        batch_size: 256,
        optimizer: OptimizerConfig {
            warmup_steps: 50,
            ..Default::default()
        },
    }
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetSpec) -> Self {
        Self {
            seed: 0,
            output_dir: default_output_dir(),
            precision: default_precision(),
            device: default_device(),
            task: Task::default(),
            dataset,
            eval_dataset: None,
            encoder: EncoderConfig::default(),
            ae_training: default_training(),
            denoiser: DenoiserConfig::default(),
            diffusion: DiffusionConfig::default(),
            diffusion_training: default_training(),
            sample: SampleConfig::default(),
            theory: TheoryConfig::default(),
            paths: Paths::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| LgdError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LgdError::Config(e.to_string()))
    }

    /// SHA-256 of the TOML serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LgdError::Config(m));
        if self.precision != 32 && self.precision != 64 {
            return bad(format!(
                "precision must be 32 or 64, got {}",
                self.precision
            ));
        }
        if self.device != "cpu" {
            return bad(format!(
                "unsupported device {:?}; only cpu is available",
                self.device
            ));
        }
        self.encoder.validate()?;
        self.denoiser.validate()?;
        self.diffusion.validate()?;
        self.ae_training.validate()?;
        self.diffusion_training.validate()?;
        if self.denoiser.latent_dim != self.encoder.latent_dim {
            return bad(format!(
                "denoiser latent_dim {} differs from encoder latent_dim {}",
                self.denoiser.latent_dim, self.encoder.latent_dim
            ));
        }
        match (self.task, self.denoiser.conditioning) {
            (Task::Generation, ConditioningMode::MaskedGraph | ConditioningMode::Additive) => {
                bad("generation needs none or general conditioning".into())
            }
            (Task::GraphRegression, ConditioningMode::None | ConditioningMode::General) => {
                bad("graph-regression needs masked-graph or additive conditioning".into())
            }
            _ => Ok(()),
        }
    }

    pub fn quantize(&self) -> bool {
        self.precision == 32
    }

    pub fn autoencoder_path(&self) -> PathBuf {
        self.paths
            .autoencoder
            .clone()
            .unwrap_or_else(|| self.output_dir.join("autoencoder.ckpt"))
    }

    pub fn denoiser_path(&self) -> PathBuf {
        self.paths
            .denoiser
            .clone()
            .unwrap_or_else(|| self.output_dir.join("denoiser.ckpt"))
    }

    pub fn samples_path(&self) -> PathBuf {
        self.paths
            .samples
            .clone()
            .unwrap_or_else(|| self.output_dir.join("samples.jsonl"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::Regularization;
    use crate::diffusion::Sampler;

    #[test]
    fn minimal_file_gets_defaults() {
        let cfg =
            ExperimentConfig::parse("[dataset]\nkind = \"toy-molecule\"\nsize = 50\nseed = 1\n")
                .unwrap();
        assert_eq!(
            cfg,
            ExperimentConfig::new(DatasetSpec::toy_molecules(50, 1))
        );
        assert_eq!(cfg.ae_training.batch_size, 256);
        assert_eq!(cfg.ae_training.optimizer.learning_rate, 1e-4);
        assert!(cfg.ae_training.optimizer.cosine_decay);
    }

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig::new(DatasetSpec::regression(30, 2));
        cfg.task = Task::GraphRegression;
        cfg.denoiser.conditioning = ConditioningMode::Additive;
        cfg.encoder.regularization = Regularization::Kl;
        cfg.diffusion.sampler = Sampler::Ddpm;
        cfg.eval_dataset = Some(DatasetSpec::regression(10, 3));
        cfg.paths.samples = Some("x/y.jsonl".into());
        cfg.ae_training.optimizer.learning_rate = 0.1 + 0.2;
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
        assert_eq!(
            cfg.hash().unwrap(),
            ExperimentConfig::parse(&text).unwrap().hash().unwrap()
        );
    }

    #[test]
    fn rejects_bad_configs() {
        let base = "[dataset]\nkind = \"toy-molecule\"\nsize = 5\nseed = 1\n";
        for extra in [
            "precision = 16\n",
            "device = \"cuda:0\"\n",
            "bogus = 1\n",
            "[encoder]\nlatent_dim = 4\n",
            "task = \"graph-regression\"\n",
        ] {
            let text = format!("{extra}{base}");
            let err = ExperimentConfig::parse(&text).unwrap_err();
            assert_eq!(err.kind(), "configuration-error", "{extra}");
        }
    }
}
