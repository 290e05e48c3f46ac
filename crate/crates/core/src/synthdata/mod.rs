//! Controlled synthetic dataset: attribute vocabulary, scenes of grid-placed
//! objects, a feature oracle, wrong-label noise and file formats.

pub mod io;
mod noise;
mod oracle;
mod scene;
mod vocab;

pub use noise::{inject_walr_noise, WalrOutcome};
pub use oracle::{FeatureMap, FeatureOracle, OracleConfig};
pub use scene::{
    generate_dataset, ClassDef, Dataset, DatasetConfig, LabelSet, Nuisance, NuisanceConfig, Object, Scene, SplitRole,
    SplitSpec,
};
pub use vocab::{build_vocabulary, build_vocabulary_with, Attribute, AttributeVocabulary, BaseId, BaseKind, VocabSpec};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible vocabulary: {0}")]
    Vocabulary(String),
    #[error("invalid dataset configuration: {0}")]
    Config(String),
    #[error("class generation exhausted: {0}")]
    Exhausted(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error("{path}: truncated payload, expected {expected} bytes, found {actual}")]
    Truncated { path: String, expected: usize, actual: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent sub-seed for a named random stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}
