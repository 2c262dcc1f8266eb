use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::optim::AdamWConfig;
use crate::error::{Error, Result};
use crate::losses::DiceFpConfig;
use crate::model::ModelConfig;
use crate::synthdata::GeneratorConfig;

pub const ALIGNMENT_LEVELS: [u8; 5] = [0, 25, 50, 75, 100];
pub const DATA_RATIOS: [u8; 4] = [25, 50, 75, 100];

/// Source of the attention targets for the alignment loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentMode {
    /// Expert masks.
    Human,
    /// A fresh random shape per sample, class and epoch.
    Random,
    /// No alignment loss.
    None,
}

impl AlignmentMode {
    pub fn name(self) -> &'static str {
        match self {
            AlignmentMode::Human => "human",
            AlignmentMode::Random => "random",
            AlignmentMode::None => "none",
        }
    }
}

impl fmt::Display for AlignmentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlignmentMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "human" => Ok(AlignmentMode::Human),
            "random" => Ok(AlignmentMode::Random),
            "none" => Ok(AlignmentMode::None),
            other => Err(Error::Config(format!("unknown alignment mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub optimizer: AdamWConfig,
    /// Percent of positive training samples receiving the alignment loss.
    pub alignment_level: u8,
    pub alignment_mode: AlignmentMode,
    /// Percent of the training split used.
    pub data_ratio: u8,
    pub seed: u64,
    pub dice: DiceFpConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 32,
            max_epochs: 1000,
            patience: 30,
            optimizer: AdamWConfig::default(),
            alignment_level: 100,
            alignment_mode: AlignmentMode::Human,
            data_ratio: 100,
            seed: 0,
            dice: DiceFpConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Reference settings with a step size large enough for the synthetic
    /// benchmark to converge within the CPU budget of the sweeps.
    pub fn desk_scale() -> Self {
        Self {
            learning_rate: 1e-2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size, max_epochs and patience must be positive".into()));
        }
        if !ALIGNMENT_LEVELS.contains(&self.alignment_level) {
            return Err(Error::Config(format!(
                "alignment_level must be one of {ALIGNMENT_LEVELS:?}, got {}",
                self.alignment_level
            )));
        }
        if !DATA_RATIOS.contains(&self.data_ratio) {
            return Err(Error::Config(format!(
                "data_ratio must be one of {DATA_RATIOS:?}, got {}",
                self.data_ratio
            )));
        }
        if (self.alignment_mode == AlignmentMode::None) != (self.alignment_level == 0) {
            return Err(Error::Config(format!(
                "alignment_mode none goes with level 0 and only then (mode {}, level {})",
                self.alignment_mode, self.alignment_level
            )));
        }
        self.optimizer.validate()?;
        self.dice.validate()
    }

    /// Copy with the given alignment arm; level 0 forces mode `none`.
    pub fn with_arm(&self, level: u8, mode: AlignmentMode) -> Self {
        let mode = if level == 0 { AlignmentMode::None } else { mode };
        Self {
            alignment_level: level,
            alignment_mode: mode,
            ..self.clone()
        }
    }
}

/// One JSON file describing a whole experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub levels: Vec<u8>,
    pub ratios: Vec<u8>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::desk_scale(),
            levels: ALIGNMENT_LEVELS.to_vec(),
            ratios: DATA_RATIOS.to_vec(),
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("config {}: {m}", path.display())),
            other => other,
        })
    }

    /// Parses a possibly partial config. Absent fields, at any depth, keep
    /// the values of [`ExperimentConfig::default`].
    pub fn from_json(text: &str) -> Result<Self> {
        let patch: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut base = serde_json::to_value(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, patch);
        serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.model.validate()?;
        if self.model.image_size != self.generator.image_size || self.model.num_classes != self.generator.classes {
            return Err(Error::Config(format!(
                "model expects {}px / {} classes but generator produces {}px / {} classes",
                self.model.image_size, self.model.num_classes, self.generator.image_size, self.generator.classes
            )));
        }
        let mut arm = self.train.clone();
        if arm.alignment_level == 0 {
            arm.alignment_mode = AlignmentMode::None;
        }
        arm.validate()?;
        for l in &self.levels {
            if !ALIGNMENT_LEVELS.contains(l) {
                return Err(Error::Config(format!("unsupported alignment level {l}")));
            }
        }
        for r in &self.ratios {
            if !DATA_RATIOS.contains(r) {
                return Err(Error::Config(format!("unsupported data ratio {r}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let t = TrainConfig::default();
        assert_eq!((t.learning_rate, t.batch_size, t.max_epochs, t.patience), (5e-5, 32, 1000, 30));
        assert_eq!(t.dice.w_fp, 2.0);
        assert_eq!(t.optimizer, AdamWConfig::default());
        t.validate().unwrap();
    }

    #[test]
    fn mode_none_iff_level_zero() {
        let t = TrainConfig::default();
        assert!(t.with_arm(0, AlignmentMode::Human).validate().is_ok());
        let bad = TrainConfig {
            alignment_level: 50,
            alignment_mode: AlignmentMode::None,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            alignment_level: 30,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn experiment_config_parses_partial_json() {
        let cfg = ExperimentConfig::from_json(r#"{"seeds": [7, 8], "train": {"patience": 3}}"#).unwrap();
        assert_eq!(cfg.seeds, vec![7, 8]);
        assert_eq!(cfg.train.patience, 3);
        assert_eq!(cfg.train.learning_rate, TrainConfig::desk_scale().learning_rate);
        assert_eq!(cfg.generator, GeneratorConfig::default());
        cfg.validate().unwrap();

        assert!(matches!(ExperimentConfig::from_json("{"), Err(Error::Config(_))));
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"train": {"alignment_mode": "sideways"}}"#),
            Err(Error::Config(_))
        ));
    }
}
