//! TOML run configuration. Unknown keys are rejected at every level.
//!
//! Defaults: the loss weight `gamma = 0.2`, the 0.2/0.2/0.6 task mix, AdamW
//! `(0.9, 0.95)` with weight decay 0.01, linear DDPM betas, `T = L` LM steps,
//! and the per-mode temperatures and guidance scales of [`SampleOptions`]
//! follow the reference method. Model size, step counts, learning rates and
//! dataset size are desk-scale choices.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::sampling::{SampleMode, SampleOptions, UnmaskStrategy};
use crate::toyworld::{DatasetConfig, WorldConfig};
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

/// Sampling settings; unset fields take the mode's default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub seed: u64,
    /// Samples drawn by `sample`; inputs processed by the conditional modes.
    pub n_samples: usize,
    pub length: usize,
    pub lm_steps: Option<u32>,
    pub tau_s: Option<f64>,
    pub tau_z: Option<f64>,
    pub cfg_scale: Option<f64>,
    pub unmask: Option<UnmaskStrategy>,
    pub anti_repeat: Option<usize>,
    pub maintain_motif: bool,
    /// Scaffolding motif: `motif_len` positions starting at `motif_start`.
    pub motif_start: usize,
    pub motif_len: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_samples: 100,
            length: 48,
            lm_steps: None,
            tau_s: None,
            tau_z: None,
            cfg_scale: None,
            unmask: None,
            anti_repeat: None,
            maintain_motif: true,
            motif_start: 8,
            motif_len: 8,
        }
    }
}

impl SampleConfig {
    /// Options for `mode` with this section's overrides applied.
    pub fn options(&self, mode: SampleMode, length: usize, seed: u64) -> SampleOptions {
        let mut o = SampleOptions::for_mode(mode, length, seed);
        if self.lm_steps.is_some() {
            o.lm_steps = self.lm_steps;
        }
        if let Some(v) = self.tau_s {
            o.tau_s = v;
        }
        if let Some(v) = self.tau_z {
            o.tau_z = v;
        }
        if let Some(v) = self.cfg_scale {
            o.cfg_scale = v;
        }
        if let Some(v) = self.unmask {
            o.unmask = v;
        }
        o.anti_repeat = self.anti_repeat;
        o.maintain_motif = self.maintain_motif;
        o
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Clustering thresholds (mean per-position distance, raw space).
    pub thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { thresholds: vec![0.25, 0.5, 1.0] }
    }
}

/// Grid for `sweep`: one co-generation report per `(tau_z, cfg_scale, lm_steps)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub tau_z: Vec<f64>,
    pub cfg_scale: Vec<f64>,
    pub lm_steps: Vec<u32>,
    pub n_samples: usize,
    pub length: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            tau_z: vec![0.1, 0.35, 0.7],
            cfg_scale: vec![1.0, 2.0],
            lm_steps: vec![12, 48],
            n_samples: 20,
            length: 48,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.world.vocab_size != self.model.vocab_size || self.world.struct_dim != self.model.struct_dim {
            return Err(Error::Config("world and model disagree on vocabulary size or dimension".into()));
        }
        if self.train.ddpm_steps != self.model.ddpm_steps {
            return Err(Error::Config("train.ddpm_steps must equal model.ddpm_steps".into()));
        }
        if self.data.min_len == 0 || self.data.min_len > self.data.max_len || self.data.max_len > self.model.max_len {
            return Err(Error::Config("data lengths must satisfy 1 <= min_len <= max_len <= model.max_len".into()));
        }
        if self.eval.thresholds.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::Config("eval thresholds must be > 0".into()));
        }
        Ok(())
    }
}
