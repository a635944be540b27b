//! Run configuration: one JSON document controlling every command.
//!
//! Unknown keys are rejected. Every field has a default; the effective
//! (merged) config is echoed into each command's output directory, and
//! re-running from the echo reproduces the results.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use gridflow::flow::{DenoiserConfig, FlowConfig, FlowMode};
use gridflow::imgenc::ImageEncoderConfig;
use gridflow::metrics::{FeatureConfig, Pairing};
use gridflow::nn::{BlockKind, ModelSize, StackConfig};
use gridflow::sim::WorldConfig;
use gridflow::train::AdamWConfig;
use gridflow::vae::VaeConfig;
use gridflow::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub sim: WorldConfig,
    pub vae: VaeSection,
    pub denoiser: DenoiserSection,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: "runs/out".to_string(),
            sim: WorldConfig::default(),
            vae: VaeSection::default(),
            denoiser: DenoiserSection::default(),
            train: TrainSection::default(),
            sample: SampleSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    /// Writes the effective config into an output directory.
    pub fn echo(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir)?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(out_dir.join("config.json"), text)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct VaeSection {
    pub size: ModelSize,
    pub latent_channels: usize,
    pub patch: usize,
    pub n_bands: usize,
    pub beta: f64,
    pub huber_delta: f64,
    pub imgenc: ImageEncoderConfig,
}

impl Default for VaeSection {
    fn default() -> Self {
        Self {
            size: ModelSize::Tiny,
            latent_channels: 8,
            patch: 2,
            n_bands: 8,
            beta: 1e-6,
            huber_delta: 1.0,
            imgenc: ImageEncoderConfig::default(),
        }
    }
}

impl VaeSection {
    pub fn lower(&self) -> VaeConfig {
        VaeConfig {
            stack: StackConfig::from_size(self.size, BlockKind::Autoencoding),
            latent_channels: self.latent_channels,
            patch: self.patch,
            n_bands: self.n_bands,
            beta: self.beta,
            huber_delta: self.huber_delta,
            imgenc: self.imgenc,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserSection {
    pub size: ModelSize,
    pub patch: usize,
    pub mode: FlowMode,
    pub logit_m: f64,
    pub logit_s: f64,
    pub steps: usize,
    pub imgenc: ImageEncoderConfig,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        Self {
            size: ModelSize::Tiny,
            patch: 1,
            mode: FlowMode::Latent,
            logit_m: 0.0,
            logit_s: 1.0,
            steps: 10,
            imgenc: ImageEncoderConfig::default(),
        }
    }
}

impl DenoiserSection {
    pub fn lower(&self, latent_channels: usize) -> (DenoiserConfig, FlowConfig) {
        let channels = match self.mode {
            FlowMode::Latent => latent_channels,
            FlowMode::Raw => 2,
        };
        (
            DenoiserConfig {
                stack: StackConfig::from_size(self.size, BlockKind::Denoising),
                patch: self.patch,
                channels,
                imgenc: self.imgenc,
            },
            FlowConfig {
                steps: self.steps,
                logit_m: self.logit_m,
                logit_s: self.logit_s,
                mode: self.mode,
            },
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub weight_decay: f64,
    /// Futures per scene used for training (1 = one-future-per-condition;
    /// 0 = all futures).
    pub train_futures: usize,
    /// Scenes held out from the end of the dataset for model selection.
    pub val_scenes: usize,
    /// Steps between validation evaluations (0 = never).
    pub eval_every: usize,
    /// Steps between probe-metric rows during denoiser training (0 = never).
    pub probe_every: usize,
    pub probe_scenes: usize,
    pub probe_samples: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 4,
            lr: 6e-5,
            warmup_steps: 100,
            grad_clip: 1.0,
            weight_decay: 0.01,
            train_futures: 1,
            val_scenes: 0,
            eval_every: 0,
            probe_every: 0,
            probe_scenes: 4,
            probe_samples: 8,
        }
    }
}

impl TrainSection {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            grad_clip: self.grad_clip,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// Steps for one run: epochs sweeps over the training pairs.
    pub fn total_steps(&self, n_pairs: usize) -> usize {
        let steps_per_epoch = n_pairs.div_ceil(self.batch_size).max(1);
        self.epochs * steps_per_epoch
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub k: usize,
    pub steps: usize,
    /// Overlay upscale factor.
    pub overlay_scale: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            k: 8,
            steps: 10,
            overlay_scale: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub k: usize,
    pub pairing: Pairing,
    pub ridge: f64,
    pub features: FeatureConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            k: 8,
            pairing: Pairing::Coverage,
            ridge: 1e-6,
            features: FeatureConfig::default(),
        }
    }
}

/// Catch obviously inconsistent sections early.
pub fn validate(cfg: &RunConfig) -> Result<()> {
    cfg.sim.validate()?;
    if cfg.vae.patch == 0 || cfg.sim.geometry.grid_h() % cfg.vae.patch != 0 {
        return Err(Error::Validation(format!(
            "grid height {} not divisible by VAE patch {}",
            cfg.sim.geometry.grid_h(),
            cfg.vae.patch
        )));
    }
    if cfg.train.batch_size == 0 {
        return Err(Error::Validation("batch size must be positive".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_roundtrips() {
        let cfg = RunConfig::default();
        validate(&cfg).unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{"seed": 1, "mystery_knob": true}"#;
        assert!(serde_json::from_str::<RunConfig>(text).is_err());
        let nested = r#"{"train": {"epochs": 3, "lr_boost": 2}}"#;
        assert!(serde_json::from_str::<RunConfig>(nested).is_err());
    }

    #[test]
    fn partial_config_takes_defaults() {
        let text = r#"{"seed": 9, "train": {"epochs": 3}}"#;
        let cfg: RunConfig = serde_json::from_str(text).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, TrainSection::default().batch_size);
        assert_eq!(cfg.sample.k, 8);
    }
}
