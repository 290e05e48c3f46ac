use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::annotate::ClassAttributeMatrix;
use super::EvalError;
use crate::synthdata::{Dataset, SplitRole};

/// Closed-form ESZSL mapping
/// `V = (XXᵀ + γI)⁻¹ X Y Sᵀ (SSᵀ + λI)⁻¹`.
///
/// `x` is `d × n` (one column per image), `y` is `n × z` and `s` is `a × z`
/// (one signature column per class).
pub fn eszsl_solve(x: &DMatrix<f64>, y: &DMatrix<f64>, s: &DMatrix<f64>, gamma: f64, lambda: f64) -> Result<DMatrix<f64>, EvalError> {
    let xys = xys_product(x, y, s)?;
    solve_sandwich(&(x * x.transpose()), &(s * s.transpose()), &xys, gamma, lambda)
}

/// [`eszsl_solve`] with `Y[i, c] = 1` for image `i`'s class `classes[i]`
/// and `0` elsewhere.
pub fn eszsl_fit(x: &DMatrix<f64>, classes: &[usize], s: &DMatrix<f64>, gamma: f64, lambda: f64) -> Result<DMatrix<f64>, EvalError> {
    eszsl_solve(x, &indicator_targets(classes, s.ncols())?, s, gamma, lambda)
}

pub fn indicator_targets(classes: &[usize], z: usize) -> Result<DMatrix<f64>, EvalError> {
    if let Some(&bad) = classes.iter().find(|&&c| c >= z) {
        return Err(EvalError::Dimension(format!("class index {bad} outside {z} signatures")));
    }
    Ok(DMatrix::from_fn(classes.len(), z, |i, c| if classes[i] == c { 1.0 } else { 0.0 }))
}

fn xys_product(x: &DMatrix<f64>, y: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>, EvalError> {
    if y.nrows() != x.ncols() || y.ncols() != s.ncols() {
        return Err(EvalError::Dimension(format!(
            "X is {}×{}, Y is {}×{}, S is {}×{}",
            x.nrows(),
            x.ncols(),
            y.nrows(),
            y.ncols(),
            s.nrows(),
            s.ncols()
        )));
    }
    Ok(x * y * s.transpose())
}

fn solve_sandwich(
    xx: &DMatrix<f64>,
    ss: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
    gamma: f64,
    lambda: f64,
) -> Result<DMatrix<f64>, EvalError> {
    let a = xx + DMatrix::identity(xx.nrows(), xx.ncols()) * gamma;
    let b = ss + DMatrix::identity(ss.nrows(), ss.ncols()) * lambda;
    let ca = a
        .cholesky()
        .ok_or_else(|| EvalError::Singular(format!("XXᵀ + γI not positive definite (γ = {gamma})")))?;
    let cb = b
        .cholesky()
        .ok_or_else(|| EvalError::Singular(format!("SSᵀ + λI not positive definite (λ = {lambda})")))?;
    let left = ca.solve(rhs);
    Ok(cb.solve(&left.transpose()).transpose())
}

/// Relative residual of the stationarity condition
/// `(XXᵀ + γI) V (SSᵀ + λI) = X Y Sᵀ`, Frobenius norm.
pub fn stationarity_residual(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    s: &DMatrix<f64>,
    gamma: f64,
    lambda: f64,
    v: &DMatrix<f64>,
) -> Result<f64, EvalError> {
    let xys = xys_product(x, y, s)?;
    let a = x * x.transpose() + DMatrix::identity(x.nrows(), x.nrows()) * gamma;
    let b = s * s.transpose() + DMatrix::identity(s.nrows(), s.nrows()) * lambda;
    let lhs = a * v * b;
    Ok((lhs - &xys).norm() / xys.norm().max(f64::MIN_POSITIVE))
}

/// `argmax_y xᵀ V s_y` over the columns of `s`; ties go to the lowest index.
pub fn eszsl_predict(v: &DMatrix<f64>, x: &DMatrix<f64>, s: &DMatrix<f64>) -> Vec<usize> {
    let scores = x.transpose() * v * s;
    scores
        .row_iter()
        .map(|r| {
            let mut best = 0;
            for (k, &val) in r.iter().enumerate() {
                if val > r[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GzslConfig {
    /// Candidate values shared by γ and λ.
    pub grid: Vec<f64>,
    /// Leading fraction of each seen class's images used for training.
    pub train_fraction: f64,
    /// Scale every class signature to unit L2 norm before fitting and
    /// prediction.
    pub normalize_signatures: bool,
}

impl Default for GzslConfig {
    fn default() -> Self {
        Self {
            grid: vec![1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3],
            train_fraction: 0.8,
            normalize_signatures: true,
        }
    }
}

impl GzslConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.grid.is_empty() || self.grid.iter().any(|g| !(*g > 0.0)) {
            return Err(EvalError::Dimension("regularization grid must be non-empty and positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(EvalError::Dimension("train_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GzslReport {
    pub s: f64,
    pub u: f64,
    pub h: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Mean per-class accuracy on the validation classes at the chosen
    /// hyperparameters.
    pub val_accuracy: f64,
}

pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u == 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

/// Image partition used by [`gzsl_evaluate`].
#[derive(Clone, Debug, PartialEq)]
pub struct GzslSplit {
    /// Training images of GZSL-seen classes.
    pub train: Vec<usize>,
    /// Held-out images of GZSL-seen classes.
    pub test_seen: Vec<usize>,
    /// All images of GZSL-unseen classes.
    pub test_unseen: Vec<usize>,
}

/// Leading `train_fraction` of each seen class's images (by scene id) for
/// training, the rest for testing; unseen classes are test-only.
pub fn gzsl_split(ds: &Dataset, train_fraction: f64) -> GzslSplit {
    let mut split = GzslSplit {
        train: Vec::new(),
        test_seen: Vec::new(),
        test_unseen: Vec::new(),
    };
    for class in &ds.classes {
        let mut scenes: Vec<usize> = ds.scenes.iter().filter(|s| s.class_id == class.id).map(|s| s.id).collect();
        scenes.sort_unstable();
        if class.role.is_gzsl_seen() {
            let cut = ((scenes.len() as f64 * train_fraction).round() as usize).clamp(1, scenes.len().max(1));
            split.train.extend_from_slice(&scenes[..cut.min(scenes.len())]);
            split.test_seen.extend_from_slice(&scenes[cut.min(scenes.len())..]);
        } else {
            split.test_unseen.extend(scenes);
        }
    }
    split
}

fn columns(descriptors: &[Vec<f64>], images: &[usize]) -> DMatrix<f64> {
    let d = descriptors.first().map_or(0, Vec::len);
    DMatrix::from_fn(d, images.len(), |r, c| descriptors[images[c]][r])
}

fn signatures(matrix: &ClassAttributeMatrix, classes: &[usize], normalize: bool) -> DMatrix<f64> {
    let mut s = DMatrix::from_fn(matrix.n_attributes, classes.len(), |r, c| matrix.get(classes[c], r));
    if normalize {
        for mut col in s.column_iter_mut() {
            let n = col.norm();
            if n > 0.0 {
                col /= n;
            }
        }
    }
    s
}

/// Mean over classes of the fraction of that class's images predicted
/// correctly.
fn per_class_accuracy(images: &[usize], truth: &[usize], predicted: &[usize]) -> f64 {
    use std::collections::BTreeMap;
    let mut tally: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (i, _) in images.iter().enumerate() {
        let e = tally.entry(truth[i]).or_default();
        e.1 += 1;
        if predicted[i] == truth[i] {
            e.0 += 1;
        }
    }
    if tally.is_empty() {
        return 0.0;
    }
    tally.values().map(|(ok, n)| *ok as f64 / *n as f64).sum::<f64>() / tally.len() as f64
}

/// Fits ESZSL on the seen classes and reports S, U and H. `(γ, λ)` is
/// picked on the grid by zero-shot accuracy on the validation classes after
/// fitting without them; the final model is refit on all seen classes.
/// Predictions range over every class.
pub fn gzsl_evaluate(
    descriptors: &[Vec<f64>],
    ds: &Dataset,
    matrix: &ClassAttributeMatrix,
    config: &GzslConfig,
) -> Result<GzslReport, EvalError> {
    config.validate()?;
    if descriptors.len() != ds.scenes.len() {
        return Err(EvalError::Dimension(format!(
            "{} descriptors for {} scenes",
            descriptors.len(),
            ds.scenes.len()
        )));
    }
    if matrix.n_classes != ds.classes.len() {
        return Err(EvalError::Dimension("class-attribute matrix does not cover every class".into()));
    }
    let split = gzsl_split(ds, config.train_fraction);
    let class_of = |s: usize| ds.scenes[s].class_id;
    let val_classes: Vec<usize> = ds.classes.iter().filter(|c| c.role == SplitRole::ZslaVal).map(|c| c.id).collect();
    let fit_classes: Vec<usize> = ds
        .classes
        .iter()
        .filter(|c| c.role.is_gzsl_seen() && c.role != SplitRole::ZslaVal)
        .map(|c| c.id)
        .collect();

    // hyperparameter selection
    let (mut gamma, mut lambda, mut val_accuracy) = (config.grid[0], config.grid[0], f64::NEG_INFINITY);
    if !val_classes.is_empty() && !fit_classes.is_empty() {
        let fit_images: Vec<usize> = split.train.iter().copied().filter(|&s| fit_classes.contains(&class_of(s))).collect();
        let val_images: Vec<usize> = ds
            .scenes
            .iter()
            .filter(|s| val_classes.contains(&s.class_id))
            .map(|s| s.id)
            .collect();
        let x = columns(descriptors, &fit_images);
        let labels: Vec<usize> = fit_images
            .iter()
            .map(|&s| fit_classes.binary_search(&class_of(s)).expect("fit class"))
            .collect();
        let s_fit = signatures(matrix, &fit_classes, config.normalize_signatures);
        let s_val = signatures(matrix, &val_classes, config.normalize_signatures);
        let xv = columns(descriptors, &val_images);
        let truth: Vec<usize> = val_images.iter().map(|&s| class_of(s)).collect();
        let xx = &x * x.transpose();
        let ss = &s_fit * s_fit.transpose();
        let xys = xys_product(&x, &indicator_targets(&labels, s_fit.ncols())?, &s_fit)?;
        // Ties go to the pair closest to unit regularization in log scale,
        // then to the earlier grid entry.
        let distance = |g: f64, l: f64| g.log10().abs() + l.log10().abs();
        for &g in &config.grid {
            for &l in &config.grid {
                let v = solve_sandwich(&xx, &ss, &xys, g, l)?;
                let pred: Vec<usize> = eszsl_predict(&v, &xv, &s_val).into_iter().map(|k| val_classes[k]).collect();
                let acc = per_class_accuracy(&val_images, &truth, &pred);
                if acc > val_accuracy || (acc == val_accuracy && distance(g, l) < distance(gamma, lambda)) {
                    (gamma, lambda, val_accuracy) = (g, l, acc);
                }
            }
        }
    }

    let seen_classes: Vec<usize> = ds.classes.iter().filter(|c| c.role.is_gzsl_seen()).map(|c| c.id).collect();
    let x = columns(descriptors, &split.train);
    let labels: Vec<usize> = split
        .train
        .iter()
        .map(|&s| seen_classes.binary_search(&class_of(s)).expect("seen class"))
        .collect();
    let v = eszsl_fit(&x, &labels, &signatures(matrix, &seen_classes, config.normalize_signatures), gamma, lambda)?;
    let all: Vec<usize> = (0..ds.classes.len()).collect();
    let s_all = signatures(matrix, &all, config.normalize_signatures);
    let accuracy = |images: &[usize]| {
        let pred = eszsl_predict(&v, &columns(descriptors, images), &s_all);
        let truth: Vec<usize> = images.iter().map(|&s| class_of(s)).collect();
        per_class_accuracy(images, &truth, &pred)
    };
    let (s, u) = (accuracy(&split.test_seen), accuracy(&split.test_unseen));
    Ok(GzslReport {
        s,
        u,
        h: harmonic_mean(s, u),
        gamma,
        lambda,
        val_accuracy,
    })
}
