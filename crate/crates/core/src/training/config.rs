use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::masking::validate_ratio;

/// Which pieces of the objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Plain autoencoder: normal branch only.
    Baseline,
    /// Each sample is replaced by its masked version with some probability.
    Pasrm,
    /// Normal and masked branches together plus the consistency term.
    PasrmNct,
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(TrainMode::Baseline),
            "pasrm" => Ok(TrainMode::Pasrm),
            "pasrm_nct" => Ok(TrainMode::PasrmNct),
            other => Err(Error::config(format!(
                "unknown mode `{other}` (expected baseline, pasrm or pasrm_nct)"
            ))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Baseline => "baseline",
            TrainMode::Pasrm => "pasrm",
            TrainMode::PasrmNct => "pasrm_nct",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_epochs: usize,
    pub mask_ratio: f64,
    /// Chance of swapping in the masked input, `pasrm` mode only.
    pub pseudo_probability: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Input frames per window.
    #[serde(rename = "T")]
    pub t: usize,
    /// Blocks the consistency gradient into the normal-branch features.
    #[serde(default)]
    pub stop_grad_normal: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::PasrmNct,
            epochs: 60,
            batch_size: 4,
            lr: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            warmup_epochs: 10,
            mask_ratio: 0.75,
            pseudo_probability: 0.2,
            weights: LossWeights::default(),
            seed: 0,
            t: 4,
            stop_grad_normal: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.t == 0 {
            return Err(Error::config("epochs, batch_size and T must be positive"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be finite and >= 0"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        validate_ratio(self.mask_ratio)?;
        if !(0.0..=1.0).contains(&self.pseudo_probability) {
            return Err(Error::config(format!(
                "pseudo_probability {} is outside [0, 1]",
                self.pseudo_probability
            )));
        }
        self.weights.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("TrainConfig always serializes")
    }
}
