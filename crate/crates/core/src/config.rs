//! Experiment configuration with resolved defaults, validation and a stable
//! content hash.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionConfig, LENGTHSCALE_INIT};
use crate::encoding::Aggregation;
use crate::error::{MnpError, Result};
use crate::memory::UpdateStrategy;

/// Where the data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Two interleaving half circles; one modality.
    Moons {
        #[serde(default = "default_n_train")]
        n_train: usize,
        #[serde(default = "default_n_test")]
        n_test: usize,
        #[serde(default = "default_moons_noise")]
        noise: f64,
    },
    /// Several noisy linear views of the moons data.
    Views {
        #[serde(default = "default_views")]
        modalities: usize,
        #[serde(default = "default_n_train")]
        n_train: usize,
        #[serde(default = "default_n_test")]
        n_test: usize,
        #[serde(default = "default_moons_noise")]
        noise: f64,
    },
    /// Headerless numeric CSV files, one per modality, plus a label file.
    FeatureFiles {
        modalities: Vec<PathBuf>,
        labels: PathBuf,
        #[serde(default = "default_split")]
        train_ratio: f64,
    },
}

fn default_n_train() -> usize {
    1000
}
fn default_n_test() -> usize {
    200
}
fn default_moons_noise() -> f64 {
    0.15
}
fn default_views() -> usize {
    2
}
fn default_split() -> f64 {
    0.8
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Moons {
            n_train: default_n_train(),
            n_test: default_n_test(),
            noise: default_moons_noise(),
        }
    }
}

/// Residual MLP applied to raw inputs before attention and encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    pub width: usize,
    pub blocks: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self { width: 128, blocks: 6 }
    }
}

/// Architecture and loss hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Memory slots per modality, `N^m`.
    pub context_size: usize,
    /// Latent width `d_e`.
    pub latent_dim: usize,
    /// Monte Carlo samples `S`.
    pub mc_samples: usize,
    /// Lengthscale penalty weight.
    pub alpha: f64,
    /// Weight of the RBF loss in the total loss.
    pub beta: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub attention: AttentionConfig,
    pub memory: UpdateStrategy,
    pub aggregation: Aggregation,
    /// Whether the contrastive term enters the RBF loss.
    pub rbf_loss: bool,
    pub learn_lengthscale: bool,
    pub lengthscale_init: f64,
    pub extractor: Option<ExtractorConfig>,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            context_size: 100,
            latent_dim: 128,
            mc_samples: 5,
            alpha: 1.0,
            beta: 1.0,
            tau: 0.1,
            attention: AttentionConfig::default(),
            memory: UpdateStrategy::default(),
            aggregation: Aggregation::default(),
            rbf_loss: true,
            learn_lengthscale: true,
            lengthscale_init: LENGTHSCALE_INIT,
            extractor: None,
            leaky_slope: 0.01,
        }
    }
}

/// Optimisation schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 200,
            learning_rate: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut c = Self {
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
        };
        c.model.extractor = default_extractor(&c.dataset);
        c
    }
}

/// Synthetic inputs are projected by the residual extractor; feature files
/// are already in a feature space and are used as they are.
pub fn default_extractor(dataset: &DatasetSpec) -> Option<ExtractorConfig> {
    match dataset {
        DatasetSpec::FeatureFiles { .. } => None,
        _ => Some(ExtractorConfig::default()),
    }
}

fn field(name: &str, msg: impl std::fmt::Display) -> MnpError {
    MnpError::Config(format!("{name}: {msg}"))
}

impl ExperimentConfig {
    /// Parses a configuration. When `model.extractor` is absent it follows
    /// the dataset kind; an explicit `null` disables it.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| MnpError::Config(e.to_string()))?;
        let explicit = value.pointer("/model/extractor").is_some();
        let mut c: Self = serde_json::from_value(value).map_err(|e| MnpError::Config(e.to_string()))?;
        if !explicit {
            c.model.extractor = default_extractor(&c.dataset);
        }
        Ok(c)
    }

    /// Pretty JSON with every default resolved.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(compact.as_bytes()))
    }

    /// Checks field ranges that do not depend on the data. The class count is
    /// needed for the partition check and is supplied by the caller.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let m = &self.model;
        if m.context_size == 0 {
            return Err(field("model.context_size", "must be positive"));
        }
        if num_classes == 0 || !m.context_size.is_multiple_of(num_classes) {
            return Err(field(
                "model.context_size",
                format!("{} is not divisible by the {num_classes} classes", m.context_size),
            ));
        }
        if m.latent_dim == 0 {
            return Err(field("model.latent_dim", "must be positive"));
        }
        if m.mc_samples == 0 {
            return Err(field("model.mc_samples", "must be at least 1"));
        }
        if !m.alpha.is_finite() || m.alpha < 0.0 {
            return Err(field("model.alpha", "must be finite and non-negative"));
        }
        if !m.beta.is_finite() || m.beta < 0.0 {
            return Err(field("model.beta", "must be finite and non-negative"));
        }
        if !m.tau.is_finite() || m.tau <= 0.0 {
            return Err(field("model.tau", "must be finite and positive"));
        }
        if !m.lengthscale_init.is_finite() || m.lengthscale_init <= 0.0 {
            return Err(field("model.lengthscale_init", "must be finite and positive"));
        }
        if !m.leaky_slope.is_finite() || m.leaky_slope < 0.0 {
            return Err(field("model.leaky_slope", "must be finite and non-negative"));
        }
        if let Some(e) = m.extractor {
            if e.width == 0 {
                return Err(field("model.extractor.width", "must be positive"));
            }
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(field("train.batch_size", "must be positive"));
        }
        if !t.learning_rate.is_finite() || t.learning_rate <= 0.0 {
            return Err(field("train.learning_rate", "must be finite and positive"));
        }
        match &self.dataset {
            DatasetSpec::Moons { n_train, n_test, noise } | DatasetSpec::Views { n_train, n_test, noise, .. } => {
                if *n_train < 2 || *n_test < 2 {
                    return Err(field("dataset", "n_train and n_test must be at least 2"));
                }
                if !noise.is_finite() || *noise < 0.0 {
                    return Err(field("dataset.noise", "must be finite and non-negative"));
                }
            }
            DatasetSpec::FeatureFiles { modalities, train_ratio, .. } => {
                if modalities.is_empty() {
                    return Err(field("dataset.modalities", "needs at least one file"));
                }
                if !(*train_ratio > 0.0 && *train_ratio < 1.0) {
                    return Err(field("dataset.train_ratio", "must lie in (0, 1)"));
                }
            }
        }
        if let DatasetSpec::Views { modalities, .. } = &self.dataset {
            if *modalities < 2 {
                return Err(field("dataset.modalities", "views need at least 2 modalities"));
            }
        }
        Ok(())
    }
}
