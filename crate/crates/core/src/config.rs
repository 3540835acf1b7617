//! Experiment configuration: a TOML file with one section per subsystem.
//! Every key has a default (the desk-scale experiment), so an empty file
//! is a valid config. The effective config (after CLI overrides) is hashed
//! and stamped into every artifact; downstream stages refuse artifacts
//! produced under a different hash.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acoustic::{ModelKind, TrainConfig};
use crate::attack::{GradientMode, MAX_EPSILON};
use crate::error::{Error, Result};
use crate::uncertainty::{Aggregation, Measure};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DatasetConfig {
    pub train_size: usize,
    pub heldout_size: usize,
    pub eval_benign_size: usize,
    pub eval_adv_size: usize,
    /// Digits per utterance drawn uniformly from this range.
    pub min_digits: usize,
    pub max_digits: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train_size: 200,
            heldout_size: 150,
            eval_benign_size: 200,
            eval_adv_size: 100,
            min_digits: 1,
            max_digits: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AttackSection {
    /// Attack budgets; the full grid of the experiment.
    pub epsilons: Vec<f64>,
    pub iterations: usize,
    /// Explicit step size; default (None) is epsilon/20.
    pub step_size: Option<f64>,
    pub gradient_mode: GradientMode,
    /// Sub-nets averaged per gradient in mean mode.
    pub mean_grad_samples: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            epsilons: (0..=10).map(|k| k as f64 * 0.01).collect(),
            iterations: 100,
            step_size: None,
            gradient_mode: GradientMode::SingleSample,
            mean_grad_samples: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DetectSection {
    /// Budgets whose adversarial examples are measured and detected.
    pub epsilons: Vec<f64>,
    pub measures: Vec<Measure>,
    pub aggregation: Aggregation,
    /// Histogram bins for the report files.
    pub histogram_bins: usize,
}

impl Default for DetectSection {
    fn default() -> Self {
        DetectSection {
            epsilons: vec![0.05, 0.02],
            measures: Measure::ALL.to_vec(),
            aggregation: Aggregation::Max,
            histogram_bins: 30,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunSection {
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub models: Vec<ModelKind>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            master_seed: 17,
            out_dir: PathBuf::from("out"),
            models: ModelKind::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub attack: AttackSection,
    pub detect: DetectSection,
    pub run: RunSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = toml::from_str(&raw)
            .map_err(|e| Error::InvalidConfig { detail: format!("{}: {e}", path.display()) })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.train_size == 0 || d.heldout_size == 0 || d.eval_benign_size == 0 || d.eval_adv_size == 0
        {
            return Err(Error::InvalidConfig { detail: "dataset sizes must be >= 1".to_string() });
        }
        if d.min_digits == 0 || d.min_digits > d.max_digits || d.max_digits > 7 {
            return Err(Error::InvalidConfig {
                detail: format!("digit range {}..{} invalid (need 1 <= min <= max <= 7)", d.min_digits, d.max_digits),
            });
        }
        for &e in &self.attack.epsilons {
            if !(0.0..=MAX_EPSILON).contains(&e) {
                return Err(Error::InvalidConfig { detail: format!("attack epsilon {e} outside [0, {MAX_EPSILON}]") });
            }
        }
        if self.attack.epsilons.is_empty() || self.attack.iterations == 0 {
            return Err(Error::InvalidConfig { detail: "attack grid empty or zero iterations".to_string() });
        }
        for &e in &self.detect.epsilons {
            if !self.attack.epsilons.iter().any(|&a| a == e) {
                return Err(Error::InvalidConfig {
                    detail: format!("detect epsilon {e} is not in the attack grid"),
                });
            }
        }
        if self.detect.epsilons.is_empty() || self.detect.measures.is_empty() {
            return Err(Error::InvalidConfig { detail: "detect section needs epsilons and measures".to_string() });
        }
        if self.run.models.is_empty() {
            return Err(Error::InvalidConfig { detail: "no models configured".to_string() });
        }
        self.train.validate()?;
        Ok(())
    }

    /// Hash of the effective config; stamps every artifact. The train seed
    /// is derived from the master seed, so hashing the canonical JSON of
    /// the struct (which skips the derived field) plus the master seed
    /// covers everything that can change an output.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex::encode(&hasher.finalize()[..8])
    }

    /// Training config for one model kind with its derived seed.
    pub fn train_config_for(&self, kind: ModelKind) -> TrainConfig {
        TrainConfig {
            seed: crate::seed::derive(self.run.master_seed, &format!("train/{}", kind.as_str())),
            ..self.train.clone()
        }
    }
}
