use rayon::prelude::*;

use super::{DetectorBank, DetectorError};
use crate::numerics::{bce_term, sigmoid, unit_rows};
use crate::synthdata::FeatureMap;

/// Per-cell responses, cell-major: entry `(i·H + j)·N + k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMap {
    pub width: usize,
    pub height: usize,
    pub n: usize,
    /// Cosine between the cell feature and `|m_k|`, in `[0, 1]`.
    pub raw: Vec<f64>,
    /// `γ²·(2·raw − 1)`.
    pub calibrated: Vec<f64>,
}

impl ResponseMap {
    /// Builds a map from calibrated values alone (raw is back-solved).
    pub fn from_calibrated(width: usize, height: usize, n: usize, calibrated: Vec<f64>, gamma: f64) -> Self {
        assert_eq!(calibrated.len(), width * height * n);
        let g2 = gamma * gamma;
        let raw = calibrated.iter().map(|c| (c / g2 + 1.0) / 2.0).collect();
        Self {
            width,
            height,
            n,
            raw,
            calibrated,
        }
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn calibrated_at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.calibrated[(i * self.height + j) * self.n + k]
    }
}

pub fn calibrate(raw: f64, gamma: f64) -> f64 {
    gamma * gamma * (2.0 * raw - 1.0)
}

pub fn compute_response_map(features: &FeatureMap, bank: &DetectorBank, gamma: f64) -> Result<ResponseMap, DetectorError> {
    let (c, n) = (bank.channels(), bank.len());
    if features.channels != c {
        return Err(DetectorError::Dimension(format!(
            "features have {} channels, bank has {c}",
            features.channels
        )));
    }
    let abs_t: Vec<f64> = (0..n).flat_map(|k| bank.abs_column(k)).collect();
    let (dets, _) = unit_rows(&abs_t, n, c);
    let cells = features.cells();
    let (feats, _) = unit_rows(&features.data, cells, c);
    let mut raw = vec![0.0; cells * n];
    for cell in 0..cells {
        let f = &feats[cell * c..(cell + 1) * c];
        for k in 0..n {
            let d = &dets[k * c..(k + 1) * c];
            raw[cell * n + k] = f.iter().zip(d).map(|(a, b)| a * b).sum();
        }
    }
    let calibrated = raw.iter().map(|&r| calibrate(r, gamma)).collect();
    Ok(ResponseMap {
        width: features.width,
        height: features.height,
        n,
        raw,
        calibrated,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pooled {
    pub logits: Vec<f64>,
    pub argmax: Vec<(usize, usize)>,
}

/// Max over cells per channel; ties go to the smallest `(i, j)`.
pub fn pool_max(map: &ResponseMap) -> Pooled {
    let mut logits = vec![f64::NEG_INFINITY; map.n];
    let mut best = vec![0usize; map.n];
    for cell in 0..map.cells() {
        for k in 0..map.n {
            let v = map.calibrated[cell * map.n + k];
            if v > logits[k] {
                logits[k] = v;
                best[k] = cell;
            }
        }
    }
    Pooled {
        logits,
        argmax: best.into_iter().map(|c| (c / map.height, c % map.height)).collect(),
    }
}

/// Ground-truth cell for positives, mean over cells for negatives.
/// `phi` and `locations` are indexed by map channel.
pub fn pool_location_guided(
    map: &ResponseMap,
    phi: &[bool],
    locations: &[Option<(usize, usize)>],
) -> Result<Vec<f64>, DetectorError> {
    if phi.len() != map.n || locations.len() != map.n {
        return Err(DetectorError::Dimension("label length differs from channel count".into()));
    }
    (0..map.n)
        .map(|k| {
            if phi[k] {
                let (i, j) = locations[k].ok_or(DetectorError::MissingLocation { channel: k })?;
                if i >= map.width || j >= map.height {
                    return Err(DetectorError::Dimension(format!("location ({i},{j}) outside the grid")));
                }
                Ok(map.calibrated_at(i, j, k))
            } else {
                let sum: f64 = (0..map.cells()).map(|c| map.calibrated[c * map.n + k]).sum();
                Ok(sum / map.cells() as f64)
            }
        })
        .collect()
}

/// Summed BCE with both logarithms clamped at `1e-12`.
pub fn loss_bce(logits: &[f64], phi: &[bool]) -> f64 {
    logits
        .iter()
        .zip(phi)
        .map(|(&r, &p)| bce_term(r, if p { 1.0 } else { 0.0 }))
        .sum()
}

/// Sigmoid response mass weighted by squared grid distance to each
/// channel's peak.
pub fn loss_umc(map: &ResponseMap) -> f64 {
    let peaks = pool_max(map).argmax;
    let mut total = 0.0;
    for cell in 0..map.cells() {
        let (i, j) = ((cell / map.height) as f64, (cell % map.height) as f64);
        for (k, &(pi, pj)) in peaks.iter().enumerate() {
            let d2 = (i - pi as f64).powi(2) + (j - pj as f64).powi(2);
            total += sigmoid(map.calibrated[cell * map.n + k]) * d2;
        }
    }
    total
}

/// Inference output for one image; always max-pooled.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub logits: Vec<f64>,
    pub posteriors: Vec<f64>,
    pub cells: Vec<(usize, usize)>,
}

pub fn detect(features: &FeatureMap, bank: &DetectorBank, gamma: f64) -> Result<Detection, DetectorError> {
    let pooled = pool_max(&compute_response_map(features, bank, gamma)?);
    Ok(Detection {
        posteriors: pooled.logits.iter().map(|&r| sigmoid(r)).collect(),
        logits: pooled.logits,
        cells: pooled.argmax,
    })
}

/// [`detect`] over many images; parallel, results in input order.
pub fn detect_all(features: &[FeatureMap], bank: &DetectorBank, gamma: f64) -> Result<Vec<Detection>, DetectorError> {
    features.par_iter().map(|f| detect(f, bank, gamma)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::BankRole;

    fn bank_from(cols: &[Vec<f64>]) -> DetectorBank {
        DetectorBank::from_columns(BankRole::Seen, (0..cols.len()).collect(), cols).unwrap()
    }

    fn single_cell(v: Vec<f64>) -> FeatureMap {
        FeatureMap {
            width: 1,
            height: 1,
            channels: v.len(),
            data: v,
        }
    }

    #[test]
    fn collinear_and_orthogonal_responses() {
        let bank = bank_from(&[vec![0.6, -0.8, 0.0], vec![0.0, 0.0, 1.0]]);
        let map = compute_response_map(&single_cell(vec![1.2, 1.6, 0.0]), &bank, 5.0).unwrap();
        assert!((map.raw[0] - 1.0).abs() < 1e-15);
        assert!((map.calibrated[0] - 25.0).abs() < 1e-12);
        assert_eq!(map.raw[1], 0.0);
        assert_eq!(map.calibrated[1], -25.0);
        assert_eq!(calibrate(0.5, 5.0), 0.0);
    }

    #[test]
    fn zero_feature_cell_gives_zero_raw() {
        let bank = bank_from(&[vec![1.0, 0.0]]);
        let map = compute_response_map(&single_cell(vec![0.0, 0.0]), &bank, 5.0).unwrap();
        assert_eq!(map.raw[0], 0.0);
    }

    #[test]
    fn channel_mismatch_errors() {
        let bank = bank_from(&[vec![1.0, 0.0]]);
        assert!(compute_response_map(&single_cell(vec![1.0, 0.0, 0.0]), &bank, 5.0).is_err());
    }

    #[test]
    fn max_pool_examples() {
        let one = ResponseMap::from_calibrated(1, 1, 1, vec![-4.0], 5.0);
        assert_eq!(pool_max(&one).logits, vec![-4.0]);
        let mut vals = vec![0.0; 9];
        vals[2 * 3 + 1] = 7.3;
        let map = ResponseMap::from_calibrated(3, 3, 1, vals, 5.0);
        let p = pool_max(&map);
        assert_eq!(p.logits, vec![7.3]);
        assert_eq!(p.argmax, vec![(2, 1)]);
        let ties = ResponseMap::from_calibrated(2, 2, 1, vec![1.0, 3.0, 3.0, 3.0], 5.0);
        assert_eq!(pool_max(&ties).argmax, vec![(0, 1)]);
    }

    #[test]
    fn location_guided_examples() {
        let mut vals = vec![20.0; 9];
        vals[4] = -3.0;
        let map = ResponseMap::from_calibrated(3, 3, 1, vals, 5.0);
        assert_eq!(pool_location_guided(&map, &[true], &[Some((1, 1))]).unwrap(), vec![-3.0]);
        let flat = ResponseMap::from_calibrated(3, 3, 1, vec![1.5; 9], 5.0);
        assert_eq!(pool_location_guided(&flat, &[false], &[None]).unwrap(), vec![1.5]);
        assert!(matches!(
            pool_location_guided(&flat, &[true], &[None]),
            Err(DetectorError::MissingLocation { channel: 0 })
        ));
    }

    #[test]
    fn loss_examples() {
        assert!((loss_bce(&[0.0], &[true]) - std::f64::consts::LN_2).abs() < 1e-15);
        let total = loss_bce(&[25.0, -25.0], &[true, false]);
        assert!((total - 2.0 * (-25.0f64).exp().ln_1p()).abs() < 1e-22);
        assert_eq!(loss_umc(&ResponseMap::from_calibrated(1, 1, 1, vec![3.0], 5.0)), 0.0);
        let pair = ResponseMap::from_calibrated(1, 2, 1, vec![10.0, 0.0], 5.0);
        assert!((loss_umc(&pair) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn umc_single_peak_is_tiny() {
        let mut vals = vec![-25.0; 9];
        vals[4] = 25.0;
        let map = ResponseMap::from_calibrated(3, 3, 1, vals, 5.0);
        // four edge neighbours at distance 1, four corners at distance 2
        let oracle = (4.0 * 1.0 + 4.0 * 2.0) * sigmoid(-25.0);
        assert!((loss_umc(&map) - oracle).abs() < 1e-20);
        assert!(loss_umc(&map) <= 9.0 * sigmoid(-25.0) * 8.0);
    }
}
