//! Run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, SyntheticKind};
use crate::blocks::{InitScheme, ModelConfig};
use crate::diffcore::Dtype;
use crate::error::{Error, Result};
use crate::router::LbLossConfig;
use crate::stability::{AdamConfig, PerClass, ZLossConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Load-balance factor α.
    pub alpha: f64,
    /// FFN expert groups of the load-balance loss.
    pub lb_groups: usize,
    /// Hidden z-loss coefficient λ.
    pub z_lambda: f64,
    pub mtp_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 3e-4, lb_groups: 4, z_lambda: 1e-5, mtp_weight: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub mu: f64,
    pub mu_decay: f64,
    pub update_every: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self { mu: 1.0, mu_decay: 1.0, update_every: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub warmup: usize,
    pub batch_size: usize,
    /// Tokens per sequence window, including the shifted targets.
    pub seq_len: usize,
    /// Final learning rate as a fraction of the peak (cosine decay).
    pub min_lr_ratio: f64,
}

impl ScheduleConfig {
    /// Learning-rate multiplier at `step`: linear warmup then cosine decay.
    pub fn lr_scale(&self, step: usize) -> f64 {
        if step < self.warmup {
            return (step + 1) as f64 / self.warmup as f64;
        }
        let span = (self.steps - self.warmup).max(1) as f64;
        let t = ((step - self.warmup) as f64 / span).min(1.0);
        self.min_lr_ratio + (1.0 - self.min_lr_ratio) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum CorpusSource {
    Synthetic { kind: SyntheticKind, bytes: usize, seed: u64 },
    File { path: PathBuf },
}

impl CorpusSource {
    pub fn load(&self, validation_fraction: f64) -> Result<Corpus> {
        match self {
            CorpusSource::Synthetic { kind, bytes, seed } => {
                Corpus::synthetic(*kind, *bytes, *seed, validation_fraction)
            }
            CorpusSource::File { path } => Corpus::from_file(path, validation_fraction),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub tag: String,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optimizer: AdamConfig,
    pub controller: ControllerConfig,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    pub corpus: CorpusSource,
    pub validation_fraction: f64,
    /// Compute the LB/LM gradient ratio every this many steps (it costs an
    /// extra backward pass).
    pub rg_every: usize,
    /// Write a checkpoint every this many steps (and at the end).
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    /// Validation batches for the final evaluation.
    pub eval_batches: usize,
    #[serde(default)]
    pub checkpoint_dtype: Dtype,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// The four-layer desk model on a 2 MB synthetic prose corpus.
    pub fn desk() -> Self {
        Self {
            tag: "desk".into(),
            model: ModelConfig::desk(),
            loss: LossWeights::default(),
            optimizer: AdamConfig {
                lr: PerClass { embedding: 3e-3, hidden: 3e-3, unembedding: 3e-3 },
                ..Default::default()
            },
            controller: ControllerConfig::default(),
            schedule: ScheduleConfig { steps: 1000, warmup: 50, batch_size: 8, seq_len: 66, min_lr_ratio: 0.1 },
            seed: 0,
            corpus: CorpusSource::Synthetic { kind: SyntheticKind::Prose, bytes: 2 << 20, seed: 0 },
            validation_fraction: 0.05,
            rg_every: 10,
            checkpoint_every: None,
            eval_batches: 8,
            checkpoint_dtype: Dtype::F64,
            out_dir: None,
        }
    }

    /// Reduced width and sequence length for multi-arm experiments.
    pub fn small() -> Self {
        let mut c = Self::desk();
        c.tag = "small".into();
        let m = &mut c.model;
        m.d_model = 48;
        m.attention.heads = 2;
        m.attention.d_q = 24;
        m.attention.d_kv = 12;
        m.attention.nope_dim = 12;
        m.attention.rope_dim = 8;
        m.attention.value_dim = 12;
        m.dense_inter = 96;
        m.moe.expert_inter = 12;
        m.init = InitScheme::for_width(48);
        c.schedule = ScheduleConfig { steps: 1000, warmup: 20, batch_size: 8, seq_len: 34, min_lr_ratio: 0.1 };
        c.corpus = CorpusSource::Synthetic { kind: SyntheticKind::Prose, bytes: 1 << 20, seed: 0 };
        c.optimizer.lr = PerClass::uniform(6e-3);
        c.eval_batches = 8;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        ZLossConfig { lambda: self.loss.z_lambda }.validate()?;
        LbLossConfig { alpha: self.loss.alpha, groups: self.loss.lb_groups }.validate(self.model.moe.n_ffn)?;
        if !(self.loss.mtp_weight >= 0.0 && self.loss.mtp_weight.is_finite()) {
            return Err(Error::Config("mtp_weight must be >= 0".into()));
        }
        self.model
            .moe
            .router_config(self.controller.mu, self.controller.mu_decay, self.controller.update_every)
            .validate()?;
        let s = &self.schedule;
        if s.steps == 0 || s.batch_size == 0 || s.seq_len < 2 {
            return Err(Error::Config("need steps >= 1, batch_size >= 1 and seq_len >= 2".into()));
        }
        if s.warmup > s.steps {
            return Err(Error::Config(format!("warmup {} exceeds {} steps", s.warmup, s.steps)));
        }
        if !(0.0..=1.0).contains(&s.min_lr_ratio) {
            return Err(Error::Config("min_lr_ratio must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) || self.rg_every == 0 {
            return Err(Error::Config("need 0 <= validation_fraction < 1 and rg_every >= 1".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s).map_err(|e| Error::Config(format!("run config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for c in [RunConfig::desk(), RunConfig::small()] {
            c.validate().unwrap();
            assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = RunConfig::small();
        c.schedule.warmup = c.schedule.steps + 1;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::small();
        c.model.moe.top_k = 40;
        assert!(c.validate().is_err());
        let mut c = RunConfig::small();
        c.loss.lb_groups = 5;
        assert!(c.validate().is_err());
        assert!(RunConfig::from_json("{}").is_err());
    }

    #[test]
    fn schedule_shape() {
        let s = ScheduleConfig { steps: 100, warmup: 10, batch_size: 1, seq_len: 4, min_lr_ratio: 0.1 };
        assert_eq!(s.lr_scale(0), 0.1);
        assert_eq!(s.lr_scale(9), 1.0);
        assert_eq!(s.lr_scale(10), 1.0);
        assert!((s.lr_scale(100) - 0.1).abs() < 1e-15);
        assert!(s.lr_scale(55) < s.lr_scale(20));
    }
}
