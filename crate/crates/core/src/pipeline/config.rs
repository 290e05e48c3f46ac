use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::detector::DetectorConfig;
use crate::evalkit::GzslConfig;
use crate::synthdata::{build_vocabulary_with, derive_seed, DatasetConfig, VocabSpec};
use crate::synthesis::SynthesisConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// One threshold pooled over all seen attributes.
    Global,
    /// One threshold per seen attribute; synthesized attributes use the
    /// pooled one.
    PerAttribute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub threshold_mode: ThresholdMode,
    pub gzsl: GzslConfig,
    /// Also train unseen detectors directly on their labels as a reference.
    pub direct_reference: bool,
    pub ci_level: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            threshold_mode: ThresholdMode::Global,
            gzsl: GzslConfig::default(),
            direct_reference: true,
            ci_level: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub levels: Vec<f64>,
    pub runs: usize,
    /// Concurrent runs; 0 uses every available core.
    pub workers: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            levels: vec![0.0, 0.1, 0.3, 0.5],
            runs: 5,
            workers: 0,
        }
    }
}

/// Everything a pipeline run depends on. The top-level `seed` drives every
/// stochastic stage of a run (label noise, detector and network
/// initialization, batch order, dropout); the dataset keeps its own seed so
/// that sweep runs share one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Wrong-attribute-label rate of a single run; sweeps use
    /// `sweep.levels` instead.
    pub walr: f64,
    pub output_dir: PathBuf,
    pub vocabulary: VocabSpec,
    pub dataset: DatasetConfig,
    pub detector: DetectorConfig,
    pub synthesis: SynthesisConfig,
    pub evaluation: EvaluationConfig,
    pub sweep: SweepConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            walr: 0.0,
            output_dir: PathBuf::from("runs"),
            vocabulary: VocabSpec::default(),
            dataset: DatasetConfig::default(),
            detector: DetectorConfig::default(),
            synthesis: SynthesisConfig::default(),
            evaluation: EvaluationConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

const DETECTOR_SEED: u64 = 1;
const SYNTHESIS_SEED: u64 = 2;

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Json {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
        }
        fs::write(path, text + "\n").map_err(|e| PipelineError::io(path, e))
    }

    /// Copies the run seed into the stage configs.
    pub fn with_stage_seeds(mut self) -> Self {
        self.detector.seed = derive_seed(self.seed, DETECTOR_SEED);
        self.synthesis.seed = derive_seed(self.seed, SYNTHESIS_SEED);
        self
    }

    /// The same configuration for another run seed.
    pub fn for_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }.with_stage_seeds()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        build_vocabulary_with(&self.vocabulary)?;
        self.dataset.validate()?;
        self.detector.validate()?;
        self.synthesis.validate()?;
        self.evaluation.gzsl.validate()?;
        if !(self.evaluation.ci_level > 0.0 && self.evaluation.ci_level < 1.0) {
            return Err(PipelineError::Config("ci_level must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.walr) {
            return Err(PipelineError::Config("walr must lie in [0, 1]".into()));
        }
        if self.sweep.levels.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(PipelineError::Config("sweep levels must lie in [0, 1]".into()));
        }
        if self.sweep.runs == 0 {
            return Err(PipelineError::Config("sweep needs at least one run".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = PipelineConfig::default().with_stage_seeds();
        cfg.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        cfg.save(&path).unwrap();
        assert_eq!(PipelineConfig::load(&path).unwrap(), cfg);
    }

    #[test]
    fn default_hyperparameters() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.detector.gamma, 5.0);
        assert_eq!(cfg.detector.lambda_umc, 0.2);
        assert_eq!((cfg.detector.adam.lr, cfg.detector.adam.weight_decay), (1e-3, 1e-4));
        assert_eq!((cfg.detector.adam.beta1, cfg.detector.adam.beta2), (0.5, 0.9));
        assert_eq!((cfg.synthesis.net.heads, cfg.synthesis.net.head_dim), (16, 64));
        assert_eq!((cfg.synthesis.adam.lr, cfg.synthesis.net.dropout), (1e-4, 0.1));
        assert_eq!(cfg.sweep.levels, vec![0.0, 0.1, 0.3, 0.5]);
        assert_eq!(cfg.sweep.runs, 5);
    }

    #[test]
    fn unknown_fields_and_bad_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"sed": 3}"#).unwrap();
        assert!(matches!(PipelineConfig::load(&path), Err(PipelineError::Json { .. })));
        let mut cfg = PipelineConfig::default();
        cfg.sweep.levels = vec![0.0, 1.5];
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::default();
        cfg.detector.gamma = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"seed": 9, "detector": {"epochs": 3}}"#).unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.detector.epochs, 3);
        assert_eq!(cfg.detector.gamma, 5.0);
    }
}
