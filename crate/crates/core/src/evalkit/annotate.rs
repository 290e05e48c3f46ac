use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::detector::Detection;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    /// Youden's J = TPR − FPR at the chosen threshold.
    pub youden_j: f64,
    /// Set when no threshold separates better than chance (J ≤ 0).
    pub flagged: bool,
}

/// Threshold on posteriors in `[0, 1]` maximizing TPR − FPR, where a score
/// counts as positive when it is `≥` the threshold. Thresholds that classify
/// identically form intervals between consecutive distinct scores; the
/// midpoint of the widest maximizing interval is returned (the lowest one on
/// ties).
pub fn choose_threshold(scores: &[f64], labels: &[bool]) -> Result<ThresholdChoice, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Dimension("scores and labels differ in length".into()));
    }
    let p = labels.iter().filter(|l| **l).count() as i128;
    let n = labels.len() as i128 - p;
    if p == 0 || n == 0 {
        return Err(EvalError::Degenerate(format!("{p} positives and {n} negatives in the threshold pool")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sweep thresholds upward. Before the first distinct score everything is
    // predicted positive.
    let (mut tp, mut fp) = (p, n);
    let mut lower = 0.0f64.min(scores[order[0]]);
    // J scaled by P·N so that comparisons are exact.
    let mut best: Option<(i128, f64, f64)> = None;
    let mut consider = |j: i128, lo: f64, hi: f64| {
        let better = match best {
            None => true,
            Some((bj, blo, bhi)) => j > bj || (j == bj && hi - lo > bhi - blo),
        };
        if better {
            best = Some((j, lo, hi));
        }
    };
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        // interval (lower, s]: every score ≥ s is positive
        consider(tp * n - fp * p, lower, s);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp -= 1;
            } else {
                fp -= 1;
            }
            i += 1;
        }
        lower = s;
    }
    consider(0, lower, 1.0f64.max(lower));
    let (j, lo, hi) = best.expect("at least one interval");
    Ok(ThresholdChoice {
        threshold: 0.5 * (lo + hi),
        youden_j: j as f64 / (p * n) as f64,
        flagged: j <= 0,
    })
}

/// Binary annotations `posterior ≥ threshold` per image. `thresholds` holds
/// one value per bank column, or a single global value.
pub fn annotate(detections: &[Detection], thresholds: &[f64]) -> Result<Vec<Vec<bool>>, EvalError> {
    detections
        .iter()
        .map(|d| {
            if thresholds.len() != 1 && thresholds.len() != d.posteriors.len() {
                return Err(EvalError::Dimension(format!(
                    "{} thresholds for {} detectors",
                    thresholds.len(),
                    d.posteriors.len()
                )));
            }
            Ok(d.posteriors
                .iter()
                .enumerate()
                .map(|(k, &p)| p >= thresholds[k % thresholds.len()])
                .collect())
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Manual,
    Annotated,
}

/// Fraction of each class's images carrying each attribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAttributeMatrix {
    pub n_classes: usize,
    pub n_attributes: usize,
    /// Row-major `n_classes × n_attributes`.
    pub values: Vec<f64>,
    pub provenance: Provenance,
    pub threshold: Option<f64>,
}

impl ClassAttributeMatrix {
    pub fn row(&self, class: usize) -> &[f64] {
        &self.values[class * self.n_attributes..(class + 1) * self.n_attributes]
    }

    pub fn get(&self, class: usize, attribute: usize) -> f64 {
        self.values[class * self.n_attributes + attribute]
    }
}

/// `labels[i]` holds the binary attribute vector of image `i` and
/// `class_of[i]` its class.
pub fn build_class_attribute_matrix(
    labels: &[Vec<bool>],
    class_of: &[usize],
    n_classes: usize,
    provenance: Provenance,
    threshold: Option<f64>,
) -> Result<ClassAttributeMatrix, EvalError> {
    if labels.len() != class_of.len() {
        return Err(EvalError::Dimension("labels and class ids differ in count".into()));
    }
    let n_attributes = labels.first().map_or(0, Vec::len);
    let mut sums = vec![0.0; n_classes * n_attributes];
    let mut counts = vec![0usize; n_classes];
    for (phi, &y) in labels.iter().zip(class_of) {
        if phi.len() != n_attributes || y >= n_classes {
            return Err(EvalError::Dimension(format!("image of class {y} has {} attributes", phi.len())));
        }
        counts[y] += 1;
        for (k, &v) in phi.iter().enumerate() {
            if v {
                sums[y * n_attributes + k] += 1.0;
            }
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(EvalError::EmptyClass(empty));
    }
    for (y, &c) in counts.iter().enumerate() {
        for v in &mut sums[y * n_attributes..(y + 1) * n_attributes] {
            *v /= c as f64;
        }
    }
    Ok(ClassAttributeMatrix {
        n_classes,
        n_attributes,
        values: sums,
        provenance,
        threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_pool_gives_midpoint() {
        let c = choose_threshold(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert!((c.threshold - 0.5).abs() < 1e-15);
        assert_eq!(c.youden_j, 1.0);
        assert!(!c.flagged);
    }

    #[test]
    fn interleaved_pool_is_flagged() {
        let c = choose_threshold(&[0.1, 0.2, 0.3, 0.4], &[false, true, false, true]).unwrap();
        assert!(c.youden_j <= 0.5);
        let c = choose_threshold(&[0.5, 0.5], &[true, false]).unwrap();
        assert!(c.flagged);
        assert!((0.0..=1.0).contains(&c.threshold));
    }

    #[test]
    fn threshold_errors() {
        assert!(matches!(choose_threshold(&[0.3], &[true]), Err(EvalError::Degenerate(_))));
        assert!(choose_threshold(&[0.3], &[true, false]).is_err());
    }

    #[test]
    fn annotation_rule() {
        let d = Detection {
            logits: vec![25.0, -25.0],
            posteriors: vec![1.0, 0.2],
            cells: vec![(0, 0), (0, 0)],
        };
        assert_eq!(annotate(&[d.clone()], &[0.99]).unwrap(), vec![vec![true, false]]);
        assert_eq!(annotate(&[d.clone()], &[0.5, 0.1]).unwrap(), vec![vec![true, true]]);
        assert!(annotate(&[d], &[0.5, 0.1, 0.3]).is_err());
    }

    #[test]
    fn class_matrix_fractions() {
        let labels = vec![vec![true, false], vec![true, true], vec![false, false]];
        let m = build_class_attribute_matrix(&labels, &[0, 0, 1], 2, Provenance::Manual, None).unwrap();
        assert_eq!(m.row(0), &[1.0, 0.5]);
        assert_eq!(m.row(1), &[0.0, 0.0]);
        assert!(matches!(
            build_class_attribute_matrix(&labels, &[0, 0, 0], 2, Provenance::Manual, None),
            Err(EvalError::EmptyClass(1))
        ));
    }
}
