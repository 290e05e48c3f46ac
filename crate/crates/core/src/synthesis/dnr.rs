use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{DropoutMasks, IntersectionNet, NetConfig};
use super::SynthesisError;
use crate::detector::{BankRole, DetectorBank};
use crate::numerics::{AdamConfig, AdamState, Bindings, Graph, Tensor, TensorMap};
use crate::synthdata::{rng_for, AttributeVocabulary, BaseId, BaseKind};

const DNR_STREAM: u64 = 0x646e_7221;
const PAIR_STREAM: u64 = 0x7061_6972;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    pub net: NetConfig,
    pub adam: AdamConfig,
    /// One epoch visits every seen attribute once.
    pub epochs: usize,
    pub seed: u64,
    /// Build each base embedding from one random pair instead of averaging
    /// over all pairs.
    pub single_pair: bool,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            adam: AdamConfig {
                lr: 1e-4,
                ..AdamConfig::default()
            },
            epochs: 300,
            seed: 0,
            single_pair: false,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<(), SynthesisError> {
        self.net.validate()?;
        if !(self.adam.lr > 0.0) || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(SynthesisError::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }
}

/// `½(b_c + b_p)` without renormalization; the value the reconstruction loss
/// is measured on.
pub fn union_mean(bc: &[f64], bp: &[f64]) -> Vec<f64> {
    bc.iter().zip(bp).map(|(a, b)| 0.5 * (a + b)).collect()
}

/// Union of two base embeddings, L2-normalized for use as a detector.
pub fn union(bc: &[f64], bp: &[f64]) -> Vec<f64> {
    unit(union_mean(bc, bp))
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// The base attribute two attributes have in common, if they share exactly
/// one.
pub fn shared_base(vocab: &AttributeVocabulary, a: usize, b: usize) -> Result<BaseId, SynthesisError> {
    let (x, y) = (vocab.attribute(a), vocab.attribute(b));
    match (x.adjective == y.adjective, x.part == y.part) {
        (true, false) => Ok(BaseId::adjective(x.adjective)),
        (false, true) => Ok(BaseId::part(x.part)),
        (both, _) => Err(SynthesisError::Precondition(format!(
            "{} and {} share {} base attribute",
            vocab.attribute_name(a),
            vocab.attribute_name(b),
            if both { "more than one" } else { "no" }
        ))),
    }
}

/// Seen attributes in `bank` that contain `base`, ascending.
pub fn carriers(vocab: &AttributeVocabulary, bank: &DetectorBank, base: BaseId) -> Vec<usize> {
    bank.attributes
        .iter()
        .copied()
        .filter(|&a| {
            let attr = vocab.attribute(a);
            match base.kind {
                BaseKind::Adjective => attr.adjective == base.index,
                BaseKind::Part => attr.part == base.index,
            }
        })
        .collect()
}

/// Every unordered pair of seen attributes that shares `base`.
pub fn sharing_pairs(vocab: &AttributeVocabulary, bank: &DetectorBank, base: BaseId) -> Vec<(usize, usize)> {
    let c = carriers(vocab, bank, base);
    let mut out = Vec::new();
    for (i, &a) in c.iter().enumerate() {
        for &b in &c[i + 1..] {
            out.push((a, b));
        }
    }
    out
}

/// Intersection of two bank attributes after checking that they share
/// exactly one base attribute.
pub fn intersect_attributes(
    net: &IntersectionNet,
    bank: &DetectorBank,
    vocab: &AttributeVocabulary,
    a: usize,
    b: usize,
) -> Result<(BaseId, Vec<f64>), SynthesisError> {
    let base = shared_base(vocab, a, b)?;
    let col = |x: usize| {
        bank.position(x)
            .map(|k| bank.abs_column(k))
            .ok_or_else(|| SynthesisError::Precondition(format!("{} is not in the bank", vocab.attribute_name(x))))
    };
    Ok((base, net.intersect(&col(a)?, &col(b)?)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DnrEpochLog {
    pub epoch: usize,
    /// Mean reconstruction loss of the sampled steps in this epoch.
    pub mean_rec: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedNet {
    pub net: IntersectionNet,
    pub curve: Vec<DnrEpochLog>,
}

/// Inputs of one reconstruction step: two pairs and the target column.
#[derive(Clone, Debug)]
pub struct RecStep {
    pub adjective_pair: (Vec<f64>, Vec<f64>),
    pub part_pair: (Vec<f64>, Vec<f64>),
    pub target: Vec<f64>,
}

fn row(v: &[f64]) -> Result<Tensor, SynthesisError> {
    Ok(Tensor::new(vec![1, v.len()], v.to_vec())?)
}

/// `‖target − ½(m^c + m^p)‖` and its gradient with respect to every net
/// parameter. `masks` holds dropout masks for the adjective and the part
/// intersection; `None` runs in inference mode.
pub fn rec_loss_and_grad(
    net: &IntersectionNet,
    step: &RecStep,
    masks: Option<&(DropoutMasks, DropoutMasks)>,
) -> Result<(f64, TensorMap), SynthesisError> {
    let mut g = Graph::new();
    let nodes = net.param_nodes(&mut g);
    let names = ["a1", "a2", "p1", "p2"];
    let [a1, a2, p1, p2] = names.map(|n| g.input(n));
    let mask_nodes = masks.map(|_| {
        let [ca, cf, pa, pf] = ["ca", "cf", "pa", "pf"].map(|n| g.input(n));
        ((ca, cf), (pa, pf))
    });
    let mc = net.build(&mut g, &nodes, a1, a2, mask_nodes.map(|m| m.0));
    let mp = net.build(&mut g, &nodes, p1, p2, mask_nodes.map(|m| m.1));
    let sum = g.add(mc, mp);
    let avg = g.affine(sum, 0.5, 0.0);
    let target = g.input("target");
    let diff = g.sub(avg, target);
    let loss = g.norm(diff);

    let inputs = [
        row(&step.adjective_pair.0)?,
        row(&step.adjective_pair.1)?,
        row(&step.part_pair.0)?,
        row(&step.part_pair.1)?,
        row(&step.target)?,
    ];
    let mut bindings = net.bind(Bindings::new());
    for (name, t) in names.iter().chain(&["target"]).zip(&inputs) {
        bindings.insert(name, t);
    }
    if let Some((c, p)) = masks {
        bindings.insert("ca", &c.attention);
        bindings.insert("cf", &c.feed_forward);
        bindings.insert("pa", &p.attention);
        bindings.insert("pf", &p.feed_forward);
    }
    let value = g.forward(&bindings, loss)?.item();
    let grads = g.backward(loss, &Tensor::scalar(1.0))?;
    Ok((value, grads))
}

fn sample_pair(rng: &mut ChaCha8Rng, pool: &[usize]) -> (usize, usize) {
    let idx = index::sample(rng, pool.len(), 2);
    (pool[idx.index(0)], pool[idx.index(1)])
}

/// Every seen base attribute must be carried by at least two seen attributes
/// so that a pair exists for it.
fn carrier_table(vocab: &AttributeVocabulary, bank: &DetectorBank) -> Result<BTreeMap<BaseId, Vec<usize>>, SynthesisError> {
    let mut table = BTreeMap::new();
    for &a in &bank.attributes {
        let (c, p) = vocab.bases_of(a);
        for base in [c, p] {
            if table.contains_key(&base) {
                continue;
            }
            let list = carriers(vocab, bank, base);
            if list.len() < 2 {
                return Err(SynthesisError::Config(format!(
                    "base attribute of {} appears in only one seen attribute; no pair to intersect",
                    vocab.attribute_name(a)
                )));
            }
            table.insert(base, list);
        }
    }
    Ok(table)
}

/// Decompose-and-reassemble training: one step per seen attribute, visiting
/// them in a fresh random order every epoch. Each step intersects a random
/// pair sharing the attribute's adjective and one sharing its part, averages
/// the two results and regresses onto the attribute's own detector.
pub fn train_dnr(seen: &DetectorBank, vocab: &AttributeVocabulary, config: &SynthesisConfig) -> Result<TrainedNet, SynthesisError> {
    config.validate()?;
    if seen.is_empty() {
        return Err(SynthesisError::Config("seen bank is empty".into()));
    }
    let table = carrier_table(vocab, seen)?;
    let mut net = IntersectionNet::new(seen.channels(), config.net, config.seed)?;
    let mut adam = AdamState::new(config.adam);
    let mut rng = rng_for(config.seed, DNR_STREAM);
    let columns: BTreeMap<usize, Vec<f64>> = seen
        .attributes
        .iter()
        .enumerate()
        .map(|(k, &a)| (a, seen.abs_column(k)))
        .collect();
    let mut order = seen.attributes.clone();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, &a) in order.iter().enumerate() {
            let (c, p) = vocab.bases_of(a);
            let (c1, c2) = sample_pair(&mut rng, &table[&c]);
            let (p1, p2) = sample_pair(&mut rng, &table[&p]);
            let rec = RecStep {
                adjective_pair: (columns[&c1].clone(), columns[&c2].clone()),
                part_pair: (columns[&p1].clone(), columns[&p2].clone()),
                target: columns[&a].clone(),
            };
            let masks = (net.sample_masks(&mut rng), net.sample_masks(&mut rng));
            let (loss, grads) = rec_loss_and_grad(&net, &rec, Some(&masks)).map_err(|e| SynthesisError::Diverged {
                epoch,
                step,
                reason: e.to_string(),
            })?;
            total += loss;
            adam.step(net.params_mut(), &grads)?;
        }
        curve.push(DnrEpochLog {
            epoch,
            mean_rec: total / order.len() as f64,
        });
    }
    net.quantize();
    Ok(TrainedNet { net, curve })
}

/// Base-attribute embeddings extracted from a seen bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseAttributeBank {
    pub embeddings: BTreeMap<BaseId, Vec<f64>>,
    /// Seen-attribute pairs each embedding was built from.
    pub provenance: BTreeMap<BaseId, Vec<(usize, usize)>>,
}

impl BaseAttributeBank {
    pub fn get(&self, base: BaseId) -> Option<&[f64]> {
        self.embeddings.get(&base).map(Vec::as_slice)
    }
}

/// Intersects pairs for every base attribute carried by two or more seen
/// attributes. The outputs over all valid pairs are averaged and
/// renormalized, or a single random pair is used when `single_pair` is set.
pub fn extract_bases(
    net: &IntersectionNet,
    seen: &DetectorBank,
    vocab: &AttributeVocabulary,
    single_pair: bool,
    seed: u64,
) -> Result<BaseAttributeBank, SynthesisError> {
    let mut rng = rng_for(seed, PAIR_STREAM);
    let bases = vocab.seen_bases();
    let mut embeddings = BTreeMap::new();
    let mut provenance = BTreeMap::new();
    for base in bases {
        let mut pairs = sharing_pairs(vocab, seen, base);
        if pairs.is_empty() {
            continue;
        }
        if single_pair {
            let pick = rng.random_range(0..pairs.len());
            pairs = vec![pairs[pick]];
        }
        let mut acc = vec![0.0; seen.channels()];
        for &(a, b) in &pairs {
            let (_, v) = intersect_attributes(net, seen, vocab, a, b)?;
            acc.iter_mut().zip(&v).for_each(|(s, x)| *s += x);
        }
        acc.iter_mut().for_each(|s| *s /= pairs.len() as f64);
        embeddings.insert(base, unit(acc));
        provenance.insert(base, pairs);
    }
    Ok(BaseAttributeBank {
        embeddings,
        provenance,
    })
}

/// Union of the extracted bases for every listed attribute.
pub fn assemble(
    bases: &BaseAttributeBank,
    vocab: &AttributeVocabulary,
    attributes: &[usize],
    role: BankRole,
) -> Result<DetectorBank, SynthesisError> {
    let mut cols = Vec::with_capacity(attributes.len());
    for &a in attributes {
        let (c, p) = vocab.bases_of(a);
        match (bases.get(c), bases.get(p)) {
            (Some(bc), Some(bp)) => cols.push(union(bc, bp)),
            _ => return Err(SynthesisError::Unsynthesizable(vocab.attribute_name(a))),
        }
    }
    let mut bank = DetectorBank::from_columns(role, attributes.to_vec(), &cols)?;
    bank.quantize();
    Ok(bank)
}

/// Detectors for every unseen attribute, synthesized from the seen bank.
pub fn synthesize_unseen(
    net: &IntersectionNet,
    seen: &DetectorBank,
    vocab: &AttributeVocabulary,
    config: &SynthesisConfig,
) -> Result<(DetectorBank, BaseAttributeBank), SynthesisError> {
    let bases = extract_bases(net, seen, vocab, config.single_pair, config.seed)?;
    let bank = assemble(&bases, vocab, vocab.unseen(), BankRole::Synthesized)?;
    Ok((bank, bases))
}

/// Per-attribute reconstruction loss `‖|m^s_a| − ½(b_c + b_p)‖` of every
/// seen attribute from the extracted bases.
pub fn reconstruction_losses(
    bases: &BaseAttributeBank,
    seen: &DetectorBank,
    vocab: &AttributeVocabulary,
) -> Result<Vec<(usize, f64)>, SynthesisError> {
    seen.attributes
        .iter()
        .enumerate()
        .map(|(k, &a)| {
            let (c, p) = vocab.bases_of(a);
            let (bc, bp) = bases
                .get(c)
                .zip(bases.get(p))
                .ok_or_else(|| SynthesisError::Unsynthesizable(vocab.attribute_name(a)))?;
            let m = union_mean(bc, bp);
            let d = seen.abs_column(k).iter().zip(&m).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            Ok((a, d.sqrt()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::build_vocabulary;

    #[test]
    fn union_examples() {
        let b = [0.6, 0.8, 0.0];
        assert_eq!(union(&b, &b), b.to_vec());
        let (x, y) = ([1.0, 0.0], [0.0, 1.0]);
        assert_eq!(union_mean(&x, &y), vec![0.5, 0.5]);
        assert_eq!(union(&x, &y), union(&y, &x));
        let u = union(&x, &y);
        assert!((u[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn shared_base_cases() {
        let vocab = build_vocabulary(8, 3, 3, &[1, 2]).unwrap();
        let red_cube = vocab.lookup(1, 0).unwrap();
        let red_sphere = vocab.lookup(1, 1).unwrap();
        let blue_cube = vocab.lookup(2, 0).unwrap();
        let blue_sphere = vocab.lookup(2, 1).unwrap();
        assert_eq!(shared_base(&vocab, red_cube, red_sphere).unwrap(), BaseId::adjective(1));
        assert_eq!(shared_base(&vocab, red_cube, blue_cube).unwrap(), BaseId::part(0));
        assert!(shared_base(&vocab, red_cube, red_cube).is_err());
        assert!(shared_base(&vocab, red_cube, blue_sphere).is_err());
    }

    #[test]
    fn default_vocabulary_has_pairs_for_every_seen_base() {
        let vocab = build_vocabulary(8, 3, 3, &[1, 2]).unwrap();
        let bank = DetectorBank::random(BankRole::Seen, vocab.seen().to_vec(), 16, 0);
        let table = carrier_table(&vocab, &bank).unwrap();
        assert_eq!(table.len(), 11);
        assert!(table.values().all(|v| v.len() >= 2));
    }

    #[test]
    fn lone_carrier_is_a_config_error() {
        let vocab = build_vocabulary(8, 3, 3, &[1, 2]).unwrap();
        let bank = DetectorBank::random(BankRole::Seen, vocab.seen()[..3].to_vec(), 16, 0);
        assert!(matches!(carrier_table(&vocab, &bank), Err(SynthesisError::Config(_))));
    }

    #[test]
    fn synthesis_with_untrained_net_gives_unit_nonnegative_columns() {
        let vocab = build_vocabulary(8, 3, 3, &[1, 2]).unwrap();
        let bank = DetectorBank::random(BankRole::Seen, vocab.seen().to_vec(), 12, 3);
        let cfg = SynthesisConfig {
            net: NetConfig {
                heads: 2,
                head_dim: 4,
                ffn_mult: 2,
                dropout: 0.1,
            },
            ..SynthesisConfig::default()
        };
        let net = IntersectionNet::new(12, cfg.net, 0).unwrap();
        let (syn, bases) = synthesize_unseen(&net, &bank, &vocab, &cfg).unwrap();
        assert_eq!(syn.len(), 8);
        assert_eq!(syn.attributes, vocab.unseen());
        for k in 0..syn.len() {
            let col = syn.column(k);
            assert!(col.iter().all(|v| *v >= 0.0));
            let n: f64 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let red = BaseId::adjective(1);
        assert_eq!(bases.provenance[&red].len(), sharing_pairs(&vocab, &bank, red).len());
    }
}
