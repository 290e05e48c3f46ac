use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{BankRole, DetectorBank, DetectorError};
use crate::numerics::{AdamConfig, AdamState, Bindings, Graph, NumericsError, Tensor, TensorMap};
use crate::synthdata::{rng_for, FeatureMap, LabelSet};

const SHUFFLE_STREAM: u64 = 0x7368_7566;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Max,
    LocationGuided,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub gamma: f64,
    pub lambda_umc: f64,
    pub umc: bool,
    pub pooling: Pooling,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            gamma: 5.0,
            lambda_umc: 0.2,
            umc: true,
            pooling: Pooling::LocationGuided,
            adam: AdamConfig::default(),
            epochs: 50,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        if !(self.gamma > 0.0) || !(self.lambda_umc >= 0.0) {
            return Err(DetectorError::Config("gamma must be > 0 and lambda_umc >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(DetectorError::Config("batch_size must be positive".into()));
        }
        if !(self.adam.lr > 0.0) || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(DetectorError::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }

    /// UMC weight actually applied (0 when the term is switched off).
    pub fn effective_lambda(&self) -> f64 {
        if self.umc {
            self.lambda_umc
        } else {
            0.0
        }
    }
}

/// A mini-batch in graph-ready layout.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B·W·H, C]` stacked cell features.
    pub features: Tensor,
    /// `[B, N]` binary targets.
    pub targets: Tensor,
    /// `[B, W·H, N]` pooling weights for location-guided pooling: one-hot at
    /// the ground-truth cell for positives, uniform for negatives.
    pub pool_weights: Tensor,
    pub size: usize,
    pub width: usize,
    pub height: usize,
}

impl Batch {
    /// `attributes` maps bank columns to vocabulary ids.
    pub fn new(features: &[&FeatureMap], labels: &[&LabelSet], attributes: &[usize]) -> Result<Self, DetectorError> {
        let first = features
            .first()
            .ok_or_else(|| DetectorError::Config("empty batch".into()))?;
        let (w, h, c) = (first.width, first.height, first.channels);
        if features.len() != labels.len() {
            return Err(DetectorError::Dimension("features and labels differ in count".into()));
        }
        let (b, cells, n) = (features.len(), w * h, attributes.len());
        let mut feats = Vec::with_capacity(b * cells * c);
        let mut targets = vec![0.0; b * n];
        let mut weights = vec![0.0; b * cells * n];
        for (s, (f, l)) in features.iter().zip(labels).enumerate() {
            if (f.width, f.height, f.channels) != (w, h, c) {
                return Err(DetectorError::Dimension("feature maps in a batch differ in shape".into()));
            }
            feats.extend_from_slice(&f.data);
            for (k, &a) in attributes.iter().enumerate() {
                if a >= l.phi.len() {
                    return Err(DetectorError::Dimension(format!("attribute {a} outside label vector")));
                }
                if l.phi[a] {
                    targets[s * n + k] = 1.0;
                    let (i, j) = l.locations[a].ok_or(DetectorError::MissingLocation { channel: k })?;
                    weights[(s * cells + i * h + j) * n + k] = 1.0;
                } else {
                    for cell in 0..cells {
                        weights[(s * cells + cell) * n + k] = 1.0 / cells as f64;
                    }
                }
            }
        }
        Ok(Self {
            features: Tensor::new(vec![b * cells, c], feats)?,
            targets: Tensor::new(vec![b, n], targets)?,
            pool_weights: Tensor::new(vec![b, cells, n], weights)?,
            size: b,
            width: w,
            height: h,
        })
    }
}

/// `(1/B)·Σ_scenes [L_bce + λ·L_umc/(W·H)]` as a differentiable graph. The
/// uni-modal term is averaged over cells so that `λ` keeps its meaning
/// across grid sizes.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub gamma: f64,
    pub lambda: f64,
    pub pooling: Pooling,
}

impl Objective {
    pub fn from_config(config: &DetectorConfig) -> Self {
        Self {
            gamma: config.gamma,
            lambda: config.effective_lambda(),
            pooling: config.pooling,
        }
    }

    /// Appends the pooling and loss head on top of a `[B, W·H, N]`
    /// calibrated node.
    fn head(&self, g: &mut Graph, calibrated: crate::numerics::NodeId, batch: &Batch) -> crate::numerics::NodeId {
        let logits = match self.pooling {
            Pooling::Max => g.max_reduce(calibrated, 1),
            Pooling::LocationGuided => {
                let w = g.input("pool_weights");
                let weighted = g.mul(calibrated, w);
                g.sum_reduce(weighted, 1)
            }
        };
        let targets = g.input("targets");
        let mut loss = g.bce_with_logits(logits, targets);
        if self.lambda > 0.0 {
            let dist = g.argmax_sq_dist(calibrated, batch.width, batch.height);
            let prob = g.sigmoid(calibrated);
            let mass = g.mul(prob, dist);
            let umc = g.sum_all(mass);
            let cells = (batch.width * batch.height) as f64;
            let weighted = g.affine(umc, self.lambda / cells, 0.0);
            loss = g.add(loss, weighted);
        }
        g.affine(loss, 1.0 / batch.size as f64, 0.0)
    }

    fn run(&self, mut g: Graph, loss: crate::numerics::NodeId, name: &str, value: &Tensor, batch: &Batch) -> Result<(f64, Tensor), NumericsError> {
        let bindings = Bindings::new()
            .bind(name, value)
            .bind("features", &batch.features)
            .bind("targets", &batch.targets)
            .bind("pool_weights", &batch.pool_weights);
        let out = g.forward(&bindings, loss)?;
        let mut grads = g.backward(loss, &Tensor::scalar(1.0))?;
        Ok((out.item(), grads.remove(name).expect("parameter reached")))
    }

    /// Loss and gradient with respect to the `[C, N]` bank.
    pub fn loss_and_grad(&self, bank: &Tensor, batch: &Batch) -> Result<(f64, Tensor), NumericsError> {
        let (cells, n) = (batch.width * batch.height, bank.shape().get(1).copied().unwrap_or(0));
        let mut g = Graph::new();
        let m = g.param("bank");
        let f = g.input("features");
        let mt = g.transpose(m);
        let abs = g.abs(mt);
        let raw = g.cosine(f, abs);
        let g2 = self.gamma * self.gamma;
        let cal = g.affine(raw, 2.0 * g2, -g2);
        let cal3 = g.reshape(cal, &[batch.size, cells, n]);
        let loss = self.head(&mut g, cal3, batch);
        self.run(g, loss, "bank", bank, batch)
    }

    /// Loss and gradient with respect to a `[B, W·H, N]` calibrated map.
    pub fn loss_and_grad_calibrated(&self, calibrated: &Tensor, batch: &Batch) -> Result<(f64, Tensor), NumericsError> {
        let mut g = Graph::new();
        let cal = g.param("calibrated");
        let loss = self.head(&mut g, cal, batch);
        self.run(g, loss, "calibrated", calibrated, batch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedBank {
    pub bank: DetectorBank,
    pub curve: Vec<EpochLog>,
}

/// Trains one detector per entry of `attributes` on the scenes listed in
/// `scenes`, with `labels` indexed by scene id. The feature extractor is
/// fixed; only the bank is optimized and its columns are renormalized after
/// every step.
pub fn train_detectors(
    features: &[FeatureMap],
    labels: &[LabelSet],
    scenes: &[usize],
    attributes: &[usize],
    role: BankRole,
    config: &DetectorConfig,
) -> Result<TrainedBank, DetectorError> {
    config.validate()?;
    if scenes.is_empty() || attributes.is_empty() {
        return Err(DetectorError::Config("no training scenes or attributes".into()));
    }
    let channels = features[scenes[0]].channels;
    let mut bank = DetectorBank::random(role, attributes.to_vec(), channels, config.seed);
    let objective = Objective::from_config(config);
    let mut adam = AdamState::new(config.adam);
    let mut params = TensorMap::new();
    params.insert("bank".into(), bank.embeddings().clone());
    let mut rng = rng_for(config.seed, SHUFFLE_STREAM);
    let mut order = scenes.to_vec();
    let mut curve = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let fs: Vec<&FeatureMap> = chunk.iter().map(|&s| &features[s]).collect();
            let ls: Vec<&LabelSet> = chunk.iter().map(|&s| &labels[s]).collect();
            let batch = Batch::new(&fs, &ls, attributes)?;
            let (loss, grad) = objective
                .loss_and_grad(&params["bank"], &batch)
                .map_err(|e| DetectorError::Diverged {
                    epoch,
                    step,
                    reason: e.to_string(),
                })?;
            if !loss.is_finite() {
                return Err(DetectorError::Diverged {
                    epoch,
                    step,
                    reason: format!("loss {loss}"),
                });
            }
            total += loss * chunk.len() as f64;
            count += chunk.len();
            let mut grads = TensorMap::new();
            grads.insert("bank".into(), grad);
            adam.step(&mut params, &grads)?;
            let p = params.get_mut("bank").expect("bank parameter");
            *bank.embeddings_mut() = std::mem::replace(p, Tensor::scalar(0.0));
            bank.normalize_columns();
            *p = bank.embeddings().clone();
        }
        curve.push(EpochLog {
            epoch,
            mean_loss: total / count as f64,
        });
    }
    bank.quantize();
    Ok(TrainedBank { bank, curve })
}
