//! Attribute detectors over patch features: response maps, calibration,
//! pooling, the training losses and the training loop.

mod bank;
mod response;
mod train;

pub use bank::{BankRole, DetectorBank, BANK_MAGIC};
pub use response::{
    calibrate, compute_response_map, detect, detect_all, loss_bce, loss_umc, pool_location_guided, pool_max, Detection,
    Pooled, ResponseMap,
};
pub use train::{train_detectors, Batch, DetectorConfig, EpochLog, Objective, Pooling, TrainedBank};

use thiserror::Error;

use crate::numerics::NumericsError;
use crate::synthdata::SynthError;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("positive label for channel {channel} has no location")]
    MissingLocation { channel: usize },
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged { epoch: usize, step: usize, reason: String },
    #[error("invalid detector configuration: {0}")]
    Config(String),
}
