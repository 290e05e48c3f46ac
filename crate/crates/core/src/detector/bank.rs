use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::DetectorError;
use crate::numerics::Tensor;
use crate::synthdata::io::{read_container, write_container};
use crate::synthdata::{rng_for, AttributeVocabulary};

pub const BANK_MAGIC: &[u8; 8] = b"ZSLABANK";
const INIT_STREAM: u64 = 0x696e_6974;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankRole {
    Seen,
    Base,
    Synthesized,
    /// Trained directly on unseen-attribute labels; a reference only.
    Direct,
    Random,
    /// Seen and synthesized detectors merged for annotation.
    Annotation,
}

impl BankRole {
    pub fn as_str(self) -> &'static str {
        match self {
            BankRole::Seen => "seen",
            BankRole::Base => "base",
            BankRole::Synthesized => "synthesized",
            BankRole::Direct => "direct",
            BankRole::Random => "random",
            BankRole::Annotation => "annotation",
        }
    }
}

/// `C × N` matrix whose column `k` is the embedding for `attributes[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorBank {
    pub role: BankRole,
    /// Vocabulary attribute id of every column.
    pub attributes: Vec<usize>,
    embeddings: Tensor,
}

#[derive(Serialize, Deserialize)]
struct BankHeader {
    role: BankRole,
    vocab_fingerprint: u64,
    channels: usize,
    columns: usize,
    attributes: Vec<usize>,
}

impl DetectorBank {
    pub fn new(role: BankRole, attributes: Vec<usize>, embeddings: Tensor) -> Result<Self, DetectorError> {
        match embeddings.shape() {
            [_, n] if *n == attributes.len() => Ok(Self {
                role,
                attributes,
                embeddings,
            }),
            s => Err(DetectorError::Dimension(format!(
                "bank of shape {s:?} for {} attributes",
                attributes.len()
            ))),
        }
    }

    /// Builds a bank from unit-normalized column vectors.
    pub fn from_columns(role: BankRole, attributes: Vec<usize>, columns: &[Vec<f64>]) -> Result<Self, DetectorError> {
        let c = columns.first().map_or(0, Vec::len);
        if columns.len() != attributes.len() || columns.iter().any(|v| v.len() != c) {
            return Err(DetectorError::Dimension("ragged bank columns".into()));
        }
        let n = columns.len();
        let mut data = vec![0.0; c * n];
        for (k, col) in columns.iter().enumerate() {
            for (r, v) in col.iter().enumerate() {
                data[r * n + k] = *v;
            }
        }
        let mut bank = Self::new(role, attributes, Tensor::new(vec![c, n], data)?)?;
        bank.normalize_columns();
        Ok(bank)
    }

    /// Columns drawn from a standard normal and normalized.
    pub fn random(role: BankRole, attributes: Vec<usize>, channels: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, INIT_STREAM);
        let n = attributes.len();
        let data = (0..channels * n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut bank = Self::new(role, attributes, Tensor::new(vec![channels, n], data).expect("finite"))
            .expect("shape matches");
        bank.normalize_columns();
        bank
    }

    pub fn channels(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub(crate) fn embeddings_mut(&mut self) -> &mut Tensor {
        &mut self.embeddings
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        let n = self.len();
        (0..self.channels()).map(|r| self.embeddings.data()[r * n + k]).collect()
    }

    /// Column `k` with entries replaced by their absolute values, which is
    /// the vector responses are measured against.
    pub fn abs_column(&self, k: usize) -> Vec<f64> {
        self.column(k).into_iter().map(f64::abs).collect()
    }

    /// Column index of a vocabulary attribute.
    pub fn position(&self, attribute: usize) -> Option<usize> {
        self.attributes.iter().position(|&a| a == attribute)
    }

    pub fn normalize_columns(&mut self) {
        let (c, n) = (self.channels(), self.len());
        let data = self.embeddings.data_mut();
        for k in 0..n {
            let norm = (0..c).map(|r| data[r * n + k].powi(2)).sum::<f64>().sqrt();
            if norm > 0.0 {
                for r in 0..c {
                    data[r * n + k] /= norm;
                }
            }
        }
    }

    /// Rounds every entry to `f32`, the on-disk precision.
    pub fn quantize(&mut self) {
        for v in self.embeddings.data_mut() {
            *v = (*v as f32) as f64;
        }
    }

    /// Concatenates banks column-wise and reorders by attribute id.
    pub fn merge(role: BankRole, banks: &[&DetectorBank]) -> Result<Self, DetectorError> {
        let mut cols: Vec<(usize, Vec<f64>)> = banks
            .iter()
            .flat_map(|b| (0..b.len()).map(move |k| (b.attributes[k], b.column(k))))
            .collect();
        cols.sort_by_key(|(a, _)| *a);
        if cols.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(DetectorError::Dimension("merged banks repeat an attribute".into()));
        }
        let attrs = cols.iter().map(|(a, _)| *a).collect();
        let vecs: Vec<Vec<f64>> = cols.into_iter().map(|(_, v)| v).collect();
        let c = vecs.first().map_or(0, Vec::len);
        let n = vecs.len();
        let mut data = vec![0.0; c * n];
        for (k, col) in vecs.iter().enumerate() {
            for (r, v) in col.iter().enumerate() {
                data[r * n + k] = *v;
            }
        }
        Self::new(role, attrs, Tensor::new(vec![c, n], data)?)
    }

    pub fn save(&self, path: &Path, vocab: &AttributeVocabulary) -> Result<(), DetectorError> {
        let header = BankHeader {
            role: self.role,
            vocab_fingerprint: vocab.fingerprint(),
            channels: self.channels(),
            columns: self.len(),
            attributes: self.attributes.clone(),
        };
        write_container(path, BANK_MAGIC, &header, self.embeddings.data())?;
        Ok(())
    }

    pub fn load(path: &Path, vocab: &AttributeVocabulary) -> Result<Self, DetectorError> {
        let (h, payload): (BankHeader, _) = read_container(path, BANK_MAGIC)?;
        if h.vocab_fingerprint != vocab.fingerprint() {
            return Err(DetectorError::Dimension(format!(
                "{} was written for a different vocabulary",
                path.display()
            )));
        }
        if h.attributes.len() != h.columns || h.attributes.iter().any(|&a| a >= vocab.len()) {
            return Err(DetectorError::Dimension("bank attribute list is inconsistent".into()));
        }
        let t = Tensor::new(vec![h.channels, h.columns], payload)?;
        Self::new(h.role, h.attributes, t)
    }
}
