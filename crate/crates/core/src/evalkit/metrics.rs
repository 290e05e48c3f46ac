use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::detector::{BankRole, Detection};
use crate::synthdata::{AttributeVocabulary, LabelSet};

/// Retrieval depth for AP.
pub const AP_DEPTH: usize = 50;

/// Probability that a random positive outscores a random negative, ties
/// counting one half, via the rank-sum statistic.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Dimension("scores and labels differ in length".into()));
    }
    let p = labels.iter().filter(|l| **l).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(EvalError::Degenerate(format!("{p} positives and {n} negatives")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives, using mid-ranks for ties (exact in f64)
    let mut twice_rank_sum = 0u128;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start+1..=end, mid-rank (start+1+end)/2
        let twice_mid = (start + 1 + end) as u128;
        let pos_in_tie = order[start..end].iter().filter(|&&i| labels[i]).count() as u128;
        twice_rank_sum += twice_mid * pos_in_tie;
        start = end;
    }
    let twice_u = twice_rank_sum - (p as u128) * (p as u128 + 1);
    Ok(twice_u as f64 / (2.0 * p as f64 * n as f64))
}

/// Image order used for retrieval: score descending, then image index.
pub fn retrieval_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order
}

/// AP over the top [`AP_DEPTH`] retrievals, normalized by
/// `min(P, AP_DEPTH)` where `P` counts all positives.
pub fn ap_at_50(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Dimension("scores and labels differ in length".into()));
    }
    let p = labels.iter().filter(|l| **l).count();
    if p == 0 {
        return Err(EvalError::Degenerate("no positives".into()));
    }
    Ok(ap_of_ranking(
        &retrieval_order(scores).iter().map(|&i| labels[i]).collect::<Vec<_>>(),
        p,
    ))
}

/// AP@50 of an already ranked label list with `positives` positives overall.
pub fn ap_of_ranking(ranked: &[bool], positives: usize) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &l) in ranked.iter().take(AP_DEPTH).enumerate() {
        if l {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    sum / positives.min(AP_DEPTH) as f64
}

/// Same or 8-connected neighbouring cell.
pub fn localization_correct(pred: (usize, usize), gt: (usize, usize)) -> bool {
    pred.0.abs_diff(gt.0) <= 1 && pred.1.abs_diff(gt.1) <= 1
}

pub fn localization_accuracy(pairs: &[((usize, usize), (usize, usize))]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let ok = pairs.iter().filter(|(p, g)| localization_correct(*p, *g)).count();
    Some(ok as f64 / pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeMetrics {
    pub attribute: usize,
    pub name: String,
    pub positives: usize,
    pub negatives: usize,
    pub auroc: Option<f64>,
    pub ap50: Option<f64>,
    pub la: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub role: BankRole,
    pub split: String,
    pub seed: Option<u64>,
    pub walr: Option<f64>,
    pub attributes: Vec<AttributeMetrics>,
    pub mauroc: f64,
    pub map50: f64,
    pub mla: f64,
    /// Attributes left out of an aggregate, with the reason.
    pub flagged: Vec<String>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Scores every bank column on the given images. `detections[r]` and
/// `labels[r]` describe the same image; columns are matched to label entries
/// through `attributes`.
pub fn evaluate_detections(
    role: BankRole,
    split: &str,
    vocab: &AttributeVocabulary,
    attributes: &[usize],
    detections: &[&Detection],
    labels: &[&LabelSet],
) -> Result<MetricReport, EvalError> {
    if detections.len() != labels.len() {
        return Err(EvalError::Dimension("detections and labels differ in count".into()));
    }
    let mut rows = Vec::with_capacity(attributes.len());
    let mut flagged = Vec::new();
    for (k, &a) in attributes.iter().enumerate() {
        let scores: Vec<f64> = detections.iter().map(|d| d.logits[k]).collect();
        let truth: Vec<bool> = labels.iter().map(|l| l.phi[a]).collect();
        let name = vocab.attribute_name(a);
        let auroc = auroc(&scores, &truth).ok();
        let ap50 = ap_at_50(&scores, &truth).ok();
        let pairs: Vec<_> = detections
            .iter()
            .zip(labels)
            .filter(|(_, l)| l.phi[a])
            .map(|(d, l)| (d.cells[k], l.locations[a].expect("positives carry a location")))
            .collect();
        let la = localization_accuracy(&pairs);
        let positives = truth.iter().filter(|t| **t).count();
        if auroc.is_none() {
            flagged.push(format!(
                "{name}: {positives} positives / {} negatives, excluded",
                truth.len() - positives
            ));
        }
        rows.push(AttributeMetrics {
            attribute: a,
            name,
            positives,
            negatives: truth.len() - positives,
            auroc,
            ap50,
            la,
        });
    }
    let valid = || rows.iter().filter(|r| r.auroc.is_some());
    Ok(MetricReport {
        role,
        split: split.to_string(),
        seed: None,
        walr: None,
        mauroc: mean(valid().filter_map(|r| r.auroc)),
        map50: mean(valid().filter_map(|r| r.ap50)),
        mla: mean(valid().filter_map(|r| r.la)),
        attributes: rows,
        flagged,
    })
}
