use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::SynthesisError;
use crate::numerics::{Bindings, Graph, NodeId, Tensor, TensorMap};
use crate::synthdata::io::{read_container, write_container};
use crate::synthdata::rng_for;

pub const NET_MAGIC: &[u8; 8] = b"ZSLANET\0";
const INIT_STREAM: u64 = 0x6e65_7469;
const LN_EPS: f64 = 1e-5;

/// Shape of the single encoder block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub heads: usize,
    pub head_dim: usize,
    /// Feed-forward hidden width as a multiple of the model width.
    pub ffn_mult: usize,
    pub dropout: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            heads: 16,
            head_dim: 64,
            ffn_mult: 4,
            dropout: 0.1,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), SynthesisError> {
        if self.heads == 0 || self.head_dim == 0 || self.ffn_mult == 0 {
            return Err(SynthesisError::Config("heads, head_dim and ffn_mult must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(SynthesisError::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Dropout masks for the two residual branches of one forward pass, each
/// `[1, C]` with entries `0` or `1/(1−p)`.
#[derive(Clone, Debug)]
pub struct DropoutMasks {
    pub attention: Tensor,
    pub feed_forward: Tensor,
}

/// Graph handles of every parameter, shared between several passes through
/// the block inside one graph.
pub(crate) struct ParamNodes {
    head: NodeId,
    ln1_g: NodeId,
    ln1_b: NodeId,
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
    wo: NodeId,
    bo: NodeId,
    ln2_g: NodeId,
    ln2_b: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
    expand: NodeId,
    collapse: NodeId,
}

/// One pre-norm transformer encoder block over the sequence
/// `[head, m_a, m_b]`. There are no position embeddings, so the output for
/// the head token does not depend on the order of the two inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct IntersectionNet {
    pub config: NetConfig,
    channels: usize,
    params: TensorMap,
    /// `[H·D, H]` head-membership indicator and its transpose.
    expand: Tensor,
    collapse: Tensor,
}

#[derive(Serialize, Deserialize)]
struct NetHeader {
    config: NetConfig,
    channels: usize,
    params: Vec<(String, Vec<usize>)>,
}

fn head_indicator(heads: usize, head_dim: usize) -> (Tensor, Tensor) {
    let inner = heads * head_dim;
    let mut e = vec![0.0; inner * heads];
    for h in 0..heads {
        for d in 0..head_dim {
            e[(h * head_dim + d) * heads + h] = 1.0;
        }
    }
    let expand = Tensor::new(vec![inner, heads], e).expect("finite");
    let collapse = expand.transpose().expect("rank 2");
    (expand, collapse)
}

impl IntersectionNet {
    pub fn new(channels: usize, config: NetConfig, seed: u64) -> Result<Self, SynthesisError> {
        config.validate()?;
        if channels == 0 {
            return Err(SynthesisError::Config("channel count must be positive".into()));
        }
        let mut rng = rng_for(seed, INIT_STREAM);
        let (c, inner, hidden) = (channels, config.heads * config.head_dim, channels * config.ffn_mult);
        let mut normal = |rows: usize, cols: usize, std: f64| {
            let data = (0..rows * cols).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
            Tensor::new(vec![rows, cols], data).expect("finite")
        };
        let mut params = TensorMap::new();
        params.insert("head".into(), normal(1, c, 1.0 / (c as f64).sqrt()));
        for (name, fan_in, rows, cols) in [
            ("wq", c, c, inner),
            ("wk", c, c, inner),
            ("wv", c, c, inner),
            ("wo", inner, inner, c),
            ("w1", c, c, hidden),
            ("w2", hidden, hidden, c),
        ] {
            params.insert(name.into(), normal(rows, cols, 1.0 / (fan_in as f64).sqrt()));
        }
        for (name, len) in [("bq", inner), ("bk", inner), ("bv", inner), ("bo", c), ("b1", hidden), ("b2", c)] {
            params.insert(name.into(), Tensor::zeros(&[len]));
        }
        for name in ["ln1_g", "ln2_g"] {
            params.insert(name.into(), Tensor::full(&[c], 1.0));
        }
        for name in ["ln1_b", "ln2_b"] {
            params.insert(name.into(), Tensor::zeros(&[c]));
        }
        let (expand, collapse) = head_indicator(config.heads, config.head_dim);
        Ok(Self {
            config,
            channels,
            params,
            expand,
            collapse,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn params(&self) -> &TensorMap {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut TensorMap {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Adds every parameter leaf to `g`.
    pub(crate) fn param_nodes(&self, g: &mut Graph) -> ParamNodes {
        let mut p = |name: &str| g.param(name);
        let (head, ln1_g, ln1_b) = (p("head"), p("ln1_g"), p("ln1_b"));
        let (wq, bq, wk, bk, wv, bv) = (p("wq"), p("bq"), p("wk"), p("bk"), p("wv"), p("bv"));
        let (wo, bo, ln2_g, ln2_b) = (p("wo"), p("bo"), p("ln2_g"), p("ln2_b"));
        let (w1, b1, w2, b2) = (p("w1"), p("b1"), p("w2"), p("b2"));
        ParamNodes {
            head,
            ln1_g,
            ln1_b,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2_g,
            ln2_b,
            w1,
            b1,
            w2,
            b2,
            expand: g.input("__expand"),
            collapse: g.input("__collapse"),
        }
    }

    /// Binds parameters and the constant head-indicator matrices.
    pub(crate) fn bind<'a>(&'a self, bindings: Bindings<'a>) -> Bindings<'a> {
        bindings
            .bind_all(&self.params)
            .bind("__expand", &self.expand)
            .bind("__collapse", &self.collapse)
    }

    /// Head-token output for inputs `a`, `b` (`[1, C]` nodes): the block
    /// output, then elementwise absolute value, then L2 normalization.
    /// `masks` are `(attention, feed_forward)` dropout-mask nodes.
    pub(crate) fn build(&self, g: &mut Graph, n: &ParamNodes, a: NodeId, b: NodeId, masks: Option<(NodeId, NodeId)>) -> NodeId {
        let (heads, head_dim) = (self.config.heads, self.config.head_dim);
        let inner = heads * head_dim;
        let x = g.concat_rows(&[n.head, a, b]);

        let h = g.layer_norm(x, LN_EPS);
        let h = g.mul(h, n.ln1_g);
        let h = g.add(h, n.ln1_b);
        let h0 = g.slice_rows(h, 0, 1);
        let q = g.matmul(h0, n.wq);
        let q = g.add(q, n.bq);
        let q = g.reshape(q, &[inner]);
        let k = g.matmul(h, n.wk);
        let k = g.add(k, n.bk);
        let v = g.matmul(h, n.wv);
        let v = g.add(v, n.bv);
        // per-head dot products of the head query with every key: [3, H]
        let qk = g.mul(k, q);
        let scores = g.matmul(qk, n.expand);
        let scores = g.affine(scores, 1.0 / (head_dim as f64).sqrt(), 0.0);
        let attn = g.softmax(scores, 0);
        let weights = g.matmul(attn, n.collapse);
        let weighted = g.mul(weights, v);
        let ctx = g.sum_reduce(weighted, 0);
        let ctx = g.reshape(ctx, &[1, inner]);
        let o = g.matmul(ctx, n.wo);
        let mut o = g.add(o, n.bo);
        if let Some((m, _)) = masks {
            o = g.mul(o, m);
        }
        let x0 = g.slice_rows(x, 0, 1);
        let r1 = g.add(x0, o);

        let h2 = g.layer_norm(r1, LN_EPS);
        let h2 = g.mul(h2, n.ln2_g);
        let h2 = g.add(h2, n.ln2_b);
        let f = g.matmul(h2, n.w1);
        let f = g.add(f, n.b1);
        let f = g.gelu(f);
        let f = g.matmul(f, n.w2);
        let mut f = g.add(f, n.b2);
        if let Some((_, m)) = masks {
            f = g.mul(f, m);
        }
        let r2 = g.add(r1, f);
        let out = g.abs(r2);
        g.l2_normalize(out)
    }

    /// Draws fresh inverted-dropout masks.
    pub fn sample_masks(&self, rng: &mut impl Rng) -> DropoutMasks {
        let p = self.config.dropout;
        let mut draw = || {
            let data = (0..self.channels)
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) })
                .collect();
            Tensor::new(vec![1, self.channels], data).expect("finite")
        };
        DropoutMasks {
            attention: draw(),
            feed_forward: draw(),
        }
    }

    /// Inference-mode intersection of two detector columns.
    pub fn intersect(&self, a: &[f64], b: &[f64]) -> Result<Vec<f64>, SynthesisError> {
        if a.len() != self.channels || b.len() != self.channels {
            return Err(SynthesisError::Dimension(format!(
                "inputs of length {} and {}, net expects {}",
                a.len(),
                b.len(),
                self.channels
            )));
        }
        let ta = Tensor::new(vec![1, self.channels], a.to_vec())?;
        let tb = Tensor::new(vec![1, self.channels], b.to_vec())?;
        let mut g = Graph::new();
        let nodes = self.param_nodes(&mut g);
        let (ia, ib) = (g.input("a"), g.input("b"));
        let out = self.build(&mut g, &nodes, ia, ib, None);
        let bindings = self.bind(Bindings::new()).bind("a", &ta).bind("b", &tb);
        Ok(g.forward(&bindings, out)?.into_data())
    }

    /// Rounds every parameter to `f32`, the on-disk precision.
    pub fn quantize(&mut self) {
        for t in self.params.values_mut() {
            for v in t.data_mut() {
                *v = (*v as f32) as f64;
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), SynthesisError> {
        let header = NetHeader {
            config: self.config,
            channels: self.channels,
            params: self.params.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect(),
        };
        let payload: Vec<f64> = self.params.values().flat_map(|t| t.data().iter().copied()).collect();
        write_container(path, NET_MAGIC, &header, &payload)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SynthesisError> {
        let (h, payload): (NetHeader, Vec<f64>) = read_container(path, NET_MAGIC)?;
        let mut net = Self::new(h.channels, h.config, 0)?;
        let expected: Vec<(String, Vec<usize>)> =
            net.params.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect();
        if expected != h.params {
            return Err(SynthesisError::Dimension(format!(
                "{} does not match the parameter layout of its config",
                path.display()
            )));
        }
        let mut offset = 0;
        for t in net.params.values_mut() {
            let len = t.len();
            t.data_mut().copy_from_slice(&payload[offset..offset + len]);
            offset += len;
        }
        Ok(net)
    }
}
