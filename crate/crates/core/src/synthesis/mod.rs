//! Decompose-and-reassemble: a transformer intersection that extracts the
//! base attribute shared by two seen detectors, an averaging union, the
//! reconstruction training loop and synthesis of unseen detectors.

mod dnr;
mod net;

pub use dnr::{
    assemble, carriers, extract_bases, intersect_attributes, rec_loss_and_grad, reconstruction_losses, shared_base,
    sharing_pairs, synthesize_unseen, train_dnr, union, union_mean, BaseAttributeBank, DnrEpochLog, RecStep,
    SynthesisConfig, TrainedNet,
};
pub use net::{DropoutMasks, IntersectionNet, NetConfig, NET_MAGIC};

use thiserror::Error;

use crate::detector::DetectorError;
use crate::numerics::NumericsError;
use crate::synthdata::SynthError;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid synthesis configuration: {0}")]
    Config(String),
    #[error("cannot synthesize {0}: a base attribute never occurs in two seen attributes")]
    Unsynthesizable(String),
    #[error("reconstruction training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged { epoch: usize, step: usize, reason: String },
}
