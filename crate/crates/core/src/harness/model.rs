use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{encode, EncoderParams};
use crate::error::{Error, Result};
use crate::fare::AttentionParams;
use crate::numerics::{l2_normalize_rows, Matrix};

/// Trained weights as stored in `model.json`. `attention` is present only
/// for attention-based objectives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub attention: Option<AttentionParams>,
    pub tau: f64,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if let Some(a) = &self.attention {
            a.validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Unit-norm embeddings; the objectives see only directions.
    pub fn embed(&self, features: &Matrix) -> Result<Matrix> {
        Ok(l2_normalize_rows(&encode(features, &self.encoder)?)?)
    }
}
