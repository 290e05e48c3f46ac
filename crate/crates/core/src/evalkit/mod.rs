//! Attribute metrics, automatic annotation, class-attribute matrices, ESZSL
//! and the label-noise sweep statistics.

mod annotate;
mod eszsl;
mod metrics;
mod stats;

pub use annotate::{
    annotate, build_class_attribute_matrix, choose_threshold, ClassAttributeMatrix, Provenance, ThresholdChoice,
};
pub use eszsl::{
    eszsl_fit, eszsl_predict, eszsl_solve, gzsl_evaluate, gzsl_split, harmonic_mean, indicator_targets,
    stationarity_residual, GzslConfig, GzslReport, GzslSplit,
};
pub use stats::{t_interval, Interval};
pub use metrics::{
    ap_at_50, ap_of_ranking, auroc, evaluate_detections, localization_accuracy, localization_correct,
    retrieval_order, AttributeMetrics, MetricReport, AP_DEPTH,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate label set: {0}")]
    Degenerate(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("empty class {0}")]
    EmptyClass(usize),
    #[error("singular system: {0}")]
    Singular(String),
}
