//! Stand-in for a frozen CNN backbone. Every base attribute owns two sparse
//! non-negative prototypes: an appearance prototype that stays close to the
//! object (narrow Gaussian receptive field) and a context prototype that
//! spreads over a wider neighbourhood, the way deep features of nearby
//! patches describe an object without being centred on it.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scene::{Dataset, Scene};
use super::{rng_for, AttributeVocabulary, SynthError};
use crate::numerics::Tensor;

const PROTO_STREAM: u64 = 0x7072_6f74;
const NOISE_STREAM: u64 = 0x6e6f_6973;
const MAX_PROTO_ATTEMPTS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Weight of the adjective prototype.
    pub alpha: f64,
    /// Weight of the part prototype.
    pub beta: f64,
    pub prototype_nonzeros: usize,
    pub max_prototype_cosine: f64,
    /// Relative magnitude swing caused by the material factor.
    pub material_strength: f64,
    /// Std-dev (in cells) of the appearance receptive field; 0 keeps the
    /// appearance term in its own cell.
    pub receptive_field: f64,
    /// Magnitude of the context term relative to the appearance term.
    pub context_weight: f64,
    /// Std-dev (in cells) of the context spread.
    pub context_radius: f64,
    /// Per-channel Gaussian noise in occupied cells.
    pub object_noise: f64,
    /// Per-channel Gaussian noise in empty cells (before the ReLU).
    pub background_noise: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            prototype_nonzeros: 8,
            max_prototype_cosine: 0.3,
            material_strength: 0.4,
            receptive_field: 0.35,
            context_weight: 1.0,
            context_radius: 1.5,
            object_noise: 0.05,
            background_noise: 0.05,
            seed: 7,
        }
    }
}

impl OracleConfig {
    /// No noise, no receptive-field spread, no material effect.
    pub fn noiseless() -> Self {
        Self {
            material_strength: 0.0,
            receptive_field: 0.0,
            context_weight: 0.0,
            object_noise: 0.0,
            background_noise: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let ok = self.alpha > 0.0
            && self.beta > 0.0
            && self.prototype_nonzeros > 0
            && self.max_prototype_cosine > 0.0
            && (0.0..2.0).contains(&self.material_strength)
            && self.receptive_field >= 0.0
            && self.context_weight >= 0.0
            && self.context_radius > 0.0
            && self.object_noise >= 0.0
            && self.background_noise >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(SynthError::Config("oracle parameters out of range".into()))
        }
    }
}

/// Non-negative `W × H × C` patch features, stored cell-major:
/// index `((i·H)+j)·C + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.height + j) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// `[W·H, C]` matrix view, one row per cell.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.cells(), self.channels], self.data.clone()).expect("feature maps are finite")
    }
}

#[derive(Clone, Debug)]
pub struct FeatureOracle {
    config: OracleConfig,
    channels: usize,
    adjectives: Vec<Vec<f64>>,
    parts: Vec<Vec<f64>>,
    adjective_context: Vec<Vec<f64>>,
    part_context: Vec<Vec<f64>>,
}

impl FeatureOracle {
    pub fn new(vocab: &AttributeVocabulary, channels: usize, config: OracleConfig) -> Result<Self, SynthError> {
        config.validate()?;
        let mut rng = rng_for(config.seed, PROTO_STREAM);
        let nnz = config.prototype_nonzeros.min(channels);
        let (na, np) = (vocab.n_adjectives(), vocab.n_parts());
        let total = 2 * (na + np);
        let mut protos: Vec<Vec<f64>> = Vec::with_capacity(total);
        while protos.len() < total {
            let mut attempts = 0;
            let candidate = loop {
                attempts += 1;
                if attempts > MAX_PROTO_ATTEMPTS {
                    return Err(SynthError::Config(format!(
                        "cannot place {total} prototypes in {channels} channels with cosine < {}",
                        config.max_prototype_cosine
                    )));
                }
                let mut v = vec![0.0; channels];
                for c in index::sample(&mut rng, channels, nnz) {
                    v[c] = rng.random_range(0.5..1.5);
                }
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= n);
                let ok = protos.iter().all(|p| dot(p, &v) < config.max_prototype_cosine);
                if ok {
                    break v;
                }
            };
            protos.push(candidate);
        }
        let part_context = protos.split_off(2 * na + np);
        let adjective_context = protos.split_off(na + np);
        let parts = protos.split_off(na);
        Ok(Self {
            config,
            channels,
            adjectives: protos,
            parts,
            adjective_context,
            part_context,
        })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.config
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn adjective_prototype(&self, i: usize) -> &[f64] {
        &self.adjectives[i]
    }

    pub fn part_prototype(&self, j: usize) -> &[f64] {
        &self.parts[j]
    }

    pub fn adjective_context(&self, i: usize) -> &[f64] {
        &self.adjective_context[i]
    }

    pub fn part_context(&self, j: usize) -> &[f64] {
        &self.part_context[j]
    }

    /// Deterministic in `(scene, oracle seed)`. Values are rounded to `f32`
    /// precision so that they survive the on-disk format unchanged.
    pub fn render(&self, scene: &Scene, width: usize, height: usize) -> FeatureMap {
        let c = self.channels;
        let cfg = &self.config;
        let mut fm = FeatureMap::zeros(width, height, c);
        let mut occupied = vec![false; width * height];
        for o in &scene.objects {
            occupied[o.cell.0 * height + o.cell.1] = true;
            let gain = o.nuisance.size * (1.0 + cfg.material_strength * (o.nuisance.material - 0.5));
            let (pa, pp) = (&self.adjectives[o.adjective], &self.parts[o.part]);
            let (qa, qp) = (&self.adjective_context[o.adjective], &self.part_context[o.part]);
            let pos = (o.cell.0 as f64 + o.nuisance.offset.0, o.cell.1 as f64 + o.nuisance.offset.1);
            for i in 0..width {
                for j in 0..height {
                    let d2 = (i as f64 - pos.0).powi(2) + (j as f64 - pos.1).powi(2);
                    let w = if cfg.receptive_field > 0.0 {
                        (-d2 / (2.0 * cfg.receptive_field.powi(2))).exp()
                    } else if (i, j) == o.cell {
                        1.0
                    } else {
                        0.0
                    };
                    let wc = cfg.context_weight * (-d2 / (2.0 * cfg.context_radius.powi(2))).exp();
                    let base = (i * height + j) * c;
                    for k in 0..c {
                        fm.data[base + k] += gain
                            * (w * (cfg.alpha * pa[k] + cfg.beta * pp[k]) + wc * (cfg.alpha * qa[k] + cfg.beta * qp[k]));
                    }
                }
            }
        }
        let mut rng = rng_for(cfg.seed ^ scene.id as u64, NOISE_STREAM);
        let obj = Normal::new(0.0, cfg.object_noise).expect("validated");
        let bg = Normal::new(0.0, cfg.background_noise).expect("validated");
        for (cell, occ) in occupied.iter().enumerate() {
            let dist = if *occ { &obj } else { &bg };
            let sigma = if *occ { cfg.object_noise } else { cfg.background_noise };
            for v in &mut fm.data[cell * c..(cell + 1) * c] {
                if sigma > 0.0 {
                    *v += dist.sample(&mut rng);
                }
                *v = (v.max(0.0) as f32) as f64;
            }
        }
        fm
    }

    pub fn render_dataset(&self, ds: &Dataset) -> Vec<FeatureMap> {
        use rayon::prelude::*;
        let (w, h) = (ds.config.width, ds.config.height);
        ds.scenes.par_iter().map(|s| self.render(s, w, h)).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
