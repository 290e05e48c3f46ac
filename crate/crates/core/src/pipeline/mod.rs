//! End-to-end runs: configuration, the train/synthesize/evaluate pipeline,
//! run artifacts and the label-noise sweep.

mod config;
mod log;
mod output;
mod run;
mod sweep;

pub use config::{EvaluationConfig, PipelineConfig, SweepConfig, ThresholdMode};
pub use log::{format_line, Logger};
pub use output::{
    write_annotation_outputs, write_bases, write_class_matrix, write_curve_csv, write_json, write_metrics_csv, write_run,
};
pub use run::{
    annotate_and_gzsl, annotation_f1, choose_thresholds, descriptors, evaluate_bank, evaluate_banks, manual_labels,
    mean_column_cosine, noise_seed, random_bank, run_pipeline, train_direct, train_seen, training_labels,
    AnnotationOutcome, AnnotationReport, AttributeLoss, DataBundle, EvalReport, RunOutcome, RunReport, FEATURES_FILE,
    LABELS_FILE, MANIFEST_FILE, NOISY_LABELS_FILE,
};
pub use sweep::{summarize_sweep, walr_sweep, write_sweep, LevelSummary, SweepReport, SweepRun};

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::detector::DetectorError;
use crate::evalkit::EvalError;
use crate::synthdata::SynthError;
use crate::synthesis::SynthesisError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Json { path: PathBuf, reason: String },
    #[error("{path}: {reason}")]
    Csv { path: PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    Missing(String),
}

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
