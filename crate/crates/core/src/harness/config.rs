use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, SynthConfig};
use crate::encoder::{EncoderArch, ScoringConfig};
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::fare::AttentionConfig;
use crate::losses::{LossConfig, LossKind};
use crate::sparse::LshConfig;

/// The single JSON document read by every CLI subcommand.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.synth.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Adam moment decay rates.
    pub betas: [f64; 2],
    pub eps: f64,
    /// Used by `sgd_momentum`.
    pub momentum: f64,
    /// Decoupled from the gradient for Adam.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            betas: [0.9, 0.999],
            eps: 1e-8,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !unit(self.betas[0]) || !unit(self.betas[1]) || !unit(self.momentum) {
            return Err(Error::Config("betas and momentum must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("eps must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

impl Schedule {
    /// Learning rate for `epoch` in `0..epochs`.
    pub fn learning_rate(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let t = epoch as f64 / epochs.max(1) as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossConfig,
    /// Hashing setup for `sparse_farecontrast`; defaults apply when absent.
    pub sparse: Option<LshConfig>,
    pub encoder: EncoderArch,
    pub scoring: ScoringConfig,
    pub attention: AttentionConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    pub augment: AugmentConfig,
    pub probe: ProbeConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::new(LossKind::Farecontrast),
            sparse: None,
            encoder: EncoderArch::default(),
            scoring: ScoringConfig::default(),
            attention: AttentionConfig::default(),
            epochs: 30,
            batch_size: 64,
            optimizer: OptimizerConfig::default(),
            schedule: Schedule::Cosine,
            augment: AugmentConfig::default(),
            probe: ProbeConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.scoring.validate()?;
        self.attention.validate()?;
        self.optimizer.validate()?;
        self.augment.validate()?;
        if let Some(lsh) = &self.sparse {
            if self.loss.kind != LossKind::SparseFarecontrast {
                return Err(Error::Config(format!(
                    "a sparse section is only meaningful for sparse_farecontrast, not {:?}",
                    self.loss.kind
                )));
            }
            lsh.validate()?;
        }
        if self.encoder.embed_dim == 0 || self.encoder.hidden.contains(&0) {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.batch_size < 2 && self.loss.needs_negatives() {
            return Err(Error::Config(format!(
                "{:?} needs batch_size of at least 2",
                self.loss.kind
            )));
        }
        Ok(())
    }

    pub fn lsh(&self) -> LshConfig {
        self.sparse.clone().unwrap_or_default()
    }
}
