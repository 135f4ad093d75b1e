//! Pipeline configuration: one JSON document shared by every subcommand,
//! with defaults for any field left out. Command-line flags override
//! individual fields after loading.

use std::path::Path;

use serde::{Deserialize, Serialize};

use qcrowd::density::{KernelPolicy, Level};
use qcrowd::loss::{FusionMode, LossConfig};
use qcrowd::model::{ModelConfig, TrainConfig};

use crate::CliError;

/// Kernel rendering settings shared by target generation and evaluation.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelSettings {
    pub tau: f64,
    pub truncation_radius_sigmas: f64,
    pub normalize_per_kernel: bool,
}

impl Default for KernelSettings {
    fn default() -> Self {
        Self {
            tau: 15.0,
            truncation_radius_sigmas: 4.0,
            normalize_per_kernel: true,
        }
    }
}

impl KernelSettings {
    pub fn policy(&self, level: Level) -> KernelPolicy {
        KernelPolicy {
            tau: self.tau,
            level,
            normalize_per_kernel: self.normalize_per_kernel,
            truncation_radius_sigmas: self.truncation_radius_sigmas,
        }
    }
}

/// Model architecture settings; levels come from the top-level list.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub input_size: usize,
    pub downsample: usize,
    pub channels: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            input_size: m.input_size,
            downsample: m.downsample,
            channels: m.channels,
            seed: m.seed,
        }
    }
}

/// Patch sampling settings for training.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingSettings {
    pub patch_sizes: Vec<usize>,
    pub patches_per_image: usize,
    /// Fraction of manifest images held out for validation.
    pub val_fraction: f64,
}

impl Default for SamplingSettings {
    fn default() -> Self {
        Self {
            patch_sizes: vec![224],
            patches_per_image: 4,
            val_fraction: 0.2,
        }
    }
}

/// Synthetic scene generation settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSettings {
    pub n_images: usize,
    pub width: usize,
    pub height: usize,
    pub min_points: usize,
    pub max_points: usize,
    pub clustered: bool,
    pub n_clusters: usize,
    pub cluster_spread: f64,
    pub blob_sigma: f64,
    pub blob_amplitude: f64,
}

impl Default for SceneSettings {
    fn default() -> Self {
        Self {
            n_images: 20,
            width: 224,
            height: 224,
            min_points: 10,
            max_points: 90,
            clustered: false,
            n_clusters: 4,
            cluster_spread: 12.0,
            blob_sigma: 3.0,
            blob_amplitude: 200.0,
        }
    }
}

/// The whole pipeline configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub levels: Vec<Level>,
    /// One weight per level plus a trailing count weight.
    pub weights: Vec<f64>,
    pub fusion_mode: FusionMode,
    pub kernel: KernelSettings,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub sampling: SamplingSettings,
    pub scenes: SceneSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            levels: vec![Level::Finite(1.0), Level::Finite(2.0), Level::Inf],
            weights: vec![1.0, 1.0, 1.0, 1.0],
            fusion_mode: FusionMode::RegressionOnly,
            kernel: KernelSettings::default(),
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            sampling: SamplingSettings::default(),
            scenes: SceneSettings::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let cfg = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Data(format!("cannot read config {}: {e}", p.display()))
                })?;
                serde_json::from_str(&text).map_err(|e| {
                    CliError::Data(format!("invalid config {}: {e}", p.display()))
                })?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.loss_config()?.validate().map_err(CliError::data)?;
        self.kernel
            .policy(Level::Finite(1.0))
            .validate()
            .map_err(CliError::data)?;
        self.model_config().validate().map_err(CliError::data)?;
        if self.sampling.patch_sizes.is_empty() || self.sampling.patch_sizes.contains(&0) {
            return Err(CliError::Data("patch_sizes must be nonzero".into()));
        }
        if self.sampling.patches_per_image == 0 {
            return Err(CliError::Data("patches_per_image must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.sampling.val_fraction) {
            return Err(CliError::Data("val_fraction must be in [0, 1)".into()));
        }
        if self.scenes.n_images == 0
            || self.scenes.min_points == 0
            || self.scenes.max_points < self.scenes.min_points
        {
            return Err(CliError::Data(
                "scenes need n_images >= 1 and 1 <= min_points <= max_points".into(),
            ));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> Result<LossConfig, CliError> {
        if self.weights.len() != self.levels.len() + 1 {
            return Err(CliError::Data(format!(
                "{} levels need {} weights (levels plus count), got {}",
                self.levels.len(),
                self.levels.len() + 1,
                self.weights.len()
            )));
        }
        let (count_weight, level_weights) = self.weights.split_last().expect("nonempty");
        Ok(LossConfig {
            levels: self.levels.clone(),
            level_weights: level_weights.to_vec(),
            count_weight: *count_weight,
            fusion_mode: self.fusion_mode,
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_size: self.model.input_size,
            downsample: self.model.downsample,
            channels: self.model.channels.clone(),
            levels: self.levels.clone(),
            seed: self.model.seed,
        }
    }
}
