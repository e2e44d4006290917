//! Run configuration: desk and paper presets, flat TOML files, validation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::avct::{BlockKind, DEFAULT_DEPTH};
use crate::error::{invalid, Error, Result};
use crate::grouping::AssignmentMode;
use crate::metrics::{MetricConfig, DEFAULT_BIN_THRESHOLD, MULTI_IOU_THRESHOLD, SOLO_IOU_THRESHOLD};
use crate::objective::{LossConfig, DEFAULT_TEMPERATURE};

pub const SUPPORTED_DEPTHS: [usize; 4] = [1, 3, 6, 12];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dim: usize,
    pub num_categories: usize,
    pub depth: usize,
    pub block: BlockKind,
    pub temperature: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub assignment: AssignmentMode,
    pub avct: bool,
    pub avg: bool,
    /// Sources per generated scene.
    pub n_sources: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub bin_threshold: f64,
    pub solo_iou_threshold: f64,
    pub multi_iou_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// CPU-sized defaults.
    pub fn desk() -> Self {
        Self {
            dim: 64,
            num_categories: 4,
            depth: DEFAULT_DEPTH,
            block: BlockKind::Full,
            temperature: DEFAULT_TEMPERATURE,
            batch_size: 16,
            learning_rate: 1e-3,
            epochs: 50,
            seed: 0,
            assignment: AssignmentMode::Soft,
            avct: true,
            avg: true,
            n_sources: 1,
            train_samples: 2000,
            test_samples: 200,
            bin_threshold: DEFAULT_BIN_THRESHOLD,
            solo_iou_threshold: SOLO_IOU_THRESHOLD,
            multi_iou_threshold: MULTI_IOU_THRESHOLD,
        }
    }

    /// The published optimization settings.
    pub fn paper() -> Self {
        Self { dim: 512, batch_size: 128, epochs: 100, learning_rate: 1e-4, ..Self::desk() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => invalid(format!("unknown preset {other:?} (expected desk or paper)")),
        }
    }

    /// Parses flat `key = value` TOML. A `preset` key picks the base values
    /// the remaining keys override.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::InvalidInput(e.to_string()))?;
        let base = match table.remove("preset") {
            Some(toml::Value::String(name)) => Self::preset(&name)?,
            Some(other) => return invalid(format!("preset must be a string, got {other}")),
            None => Self::desk(),
        };
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::InvalidInput(e.to_string()))?;
        merged.extend(table);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidInput(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("num_categories", self.num_categories),
            ("batch_size", self.batch_size),
            ("n_sources", self.n_sources),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return invalid(format!("{name} must be positive"));
        }
        if !SUPPORTED_DEPTHS.contains(&self.depth) {
            return invalid(format!("depth {} not in {SUPPORTED_DEPTHS:?}", self.depth));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return invalid(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        self.loss_config().validate()?;
        for (name, v) in [
            ("bin_threshold", self.bin_threshold),
            ("solo_iou_threshold", self.solo_iou_threshold),
            ("multi_iou_threshold", self.multi_iou_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return invalid(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.n_sources > self.num_categories {
            return invalid(format!(
                "{} sources need at least as many categories, have {}",
                self.n_sources, self.num_categories
            ));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { temperature: self.temperature }
    }

    /// Metric thresholds for scenes with `n_sources` sources.
    pub fn metric_config(&self, n_sources: usize) -> MetricConfig {
        let iou_threshold = if n_sources <= 1 { self.solo_iou_threshold } else { self.multi_iou_threshold };
        MetricConfig { bin_threshold: self.bin_threshold, iou_threshold }
    }

    /// Whether localization uses class-aware grouped embeddings.
    pub fn class_aware(&self) -> bool {
        self.avg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let desk = RunConfig::desk();
        assert_eq!((desk.dim, desk.batch_size, desk.epochs, desk.depth), (64, 16, 50, 3));
        desk.validate().unwrap();
        let paper = RunConfig::paper();
        assert_eq!((paper.dim, paper.batch_size, paper.epochs, paper.learning_rate), (512, 128, 100, 1e-4));
        paper.validate().unwrap();
        assert!(RunConfig::preset("huge").is_err());
    }

    #[test]
    fn toml_overrides_preset() {
        let cfg = RunConfig::from_toml_str("preset = \"paper\"\ndepth = 6\nassignment = \"hard-gumbel\"\navct = false\n").unwrap();
        assert_eq!(cfg.dim, 512);
        assert_eq!(cfg.depth, 6);
        assert_eq!(cfg.assignment, AssignmentMode::HardGumbel);
        assert!(!cfg.avct);
        let round = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(round, cfg);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml_str("depth = 4").is_err());
        assert!(RunConfig::from_toml_str("temperature = 0.0").is_err());
        assert!(RunConfig::from_toml_str("bogus = 1").is_err());
        assert!(RunConfig::from_toml_str("n_sources = 5").is_err());
        assert!(RunConfig::from_toml_str("bin_threshold = 1.5").is_err());
        assert!(RunConfig::from_toml_str("dim = 0").is_err());
    }

    #[test]
    fn thresholds_follow_source_count() {
        let cfg = RunConfig::desk();
        assert_eq!(cfg.metric_config(1).iou_threshold, 0.5);
        assert_eq!(cfg.metric_config(2).iou_threshold, 0.3);
    }
}
