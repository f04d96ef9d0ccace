//! Experiment configuration, loadable from JSON or TOML.

use super::{HarnessError, Result};
use crate::diffusion::TpDistConfig;
use crate::graph::BodyConfig;
use crate::nn::{Activation, AdamConfig};
use crate::synth::{CorruptionConfig, MotionConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub body: BodyConfig,
    /// Latent channel width `C`.
    pub channels: usize,
    /// Latent grid; `latent_h · latent_w` must equal the coarse vertex count.
    pub latent_h: usize,
    pub latent_w: usize,
    /// Hidden width of the frame encoder.
    pub hidden: usize,
    /// Residual graph-convolution layers applied to every frame.
    pub gtm_layers: usize,
    pub tpdist: TpDistConfig,
    /// 1 = fine level only, 2 = coarse and fine.
    pub hierarchy_depth: usize,
    pub tpdist_on: bool,
    pub hhloss_on: bool,
    pub activation: Activation,
    /// Train the coarse-to-fine matrix instead of keeping the pseudo-inverse.
    pub learn_resampling: bool,
    /// Millimetres per model coordinate unit.
    pub unit_mm: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            body: BodyConfig::default(),
            channels: 16,
            latent_h: 4,
            latent_w: 6,
            hidden: 128,
            gtm_layers: 2,
            tpdist: TpDistConfig::default(),
            hierarchy_depth: 2,
            tpdist_on: true,
            hhloss_on: true,
            activation: Activation::Relu,
            learn_resampling: false,
            unit_mm: 100.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The miniature configuration used for end-to-end gradient checks.
    pub fn miniature() -> Self {
        Self {
            body: BodyConfig {
                vertices_per_part: 2,
                coarse_per_part: 1,
                ..Default::default()
            },
            channels: 4,
            latent_h: 2,
            latent_w: 4,
            hidden: 8,
            gtm_layers: 1,
            tpdist: TpDistConfig {
                steps: 10,
                noise_depth: 2,
                heads: 2,
                passes: 2,
                activation: Activation::Gelu,
                ..Default::default()
            },
            activation: Activation::Gelu,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.body.validate()?;
        let nc = self.body.n_coarse();
        if self.latent_h * self.latent_w != nc {
            return bad(format!(
                "latent grid {}x{} has {} sites but the coarse mesh has {nc} vertices",
                self.latent_h,
                self.latent_w,
                self.latent_h * self.latent_w
            ));
        }
        if self.channels == 0 || self.hidden == 0 {
            return bad("channels and hidden must be positive".into());
        }
        if !(1..=2).contains(&self.hierarchy_depth) {
            return bad(format!("hierarchy_depth must be 1 or 2, got {}", self.hierarchy_depth));
        }
        if !(self.unit_mm > 0.0 && self.unit_mm.is_finite()) {
            return bad("unit_mm must be positive".into());
        }
        if self.tpdist_on {
            self.tpdist.validate(self.channels)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub vertex: f64,
    pub hh: f64,
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            vertex: 1.0,
            hh: 0.1,
            eps: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 8,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train: usize,
    pub test: usize,
    pub motion: MotionConfig,
    pub corruption: CorruptionConfig,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: 200,
            test: 50,
            motion: MotionConfig::default(),
            corruption: CorruptionConfig::default(),
            seed: 2024,
        }
    }
}

/// Everything needed to reproduce a run or an ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Seeds for the ablation grid.
    pub seeds: Vec<u64>,
    /// Run ablation cells on the rayon pool.
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            seeds: vec![0, 1, 2],
            parallel: true,
        }
    }
}

impl ExperimentConfig {
    /// Parses JSON when the text starts with `{`, TOML otherwise.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("json: {e}")))
        } else {
            toml::from_str(text).map_err(|e| HarnessError::Config(format!("toml: {e}")))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.motion.validate()?;
        self.data
            .corruption
            .validate(self.data.motion.frames, self.model.body.parts.len())?;
        if self.train.batch_size == 0 {
            return Err(HarnessError::Config("batch_size must be positive".into()));
        }
        if self.data.train == 0 {
            return Err(HarnessError::Config("training split is empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_and_toml_agree() {
        let cfg = ExperimentConfig::default();
        let json = cfg.to_json();
        assert_eq!(ExperimentConfig::parse(&json).unwrap(), cfg);
        let toml_text = toml::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::parse(&toml_text).unwrap(), cfg);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = ExperimentConfig::parse("[train]\nsteps = 3\n").unwrap();
        assert_eq!(cfg.train.steps, 3);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn grid_must_match_coarse_mesh() {
        let mut cfg = ModelConfig::default();
        cfg.latent_w = 5;
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
        assert!(ModelConfig::miniature().validate().is_ok());
    }
}
