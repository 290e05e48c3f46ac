use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Mean with a two-sided Student-t confidence interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub n: usize,
    pub mean: f64,
    /// Half width of the interval; `None` with fewer than two values.
    pub half_width: Option<f64>,
}

impl Interval {
    pub fn lower(&self) -> f64 {
        self.mean - self.half_width.unwrap_or(0.0)
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.half_width.unwrap_or(0.0)
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        self.lower() <= other.upper() && other.lower() <= self.upper()
    }
}

/// `mean ± t_{(1+level)/2, n−1} · s/√n`, with `s` the sample standard
/// deviation.
pub fn t_interval(values: &[f64], level: f64) -> Interval {
    let n = values.len();
    let mean = if n == 0 { f64::NAN } else { values.iter().sum::<f64>() / n as f64 };
    let half_width = (n >= 2).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .expect("positive degrees of freedom")
            .inverse_cdf(0.5 + level / 2.0);
        t * (var / n as f64).sqrt()
    });
    Interval { n, mean, half_width }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_runs_use_four_degrees_of_freedom() {
        let iv = t_interval(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.95);
        assert_eq!(iv.mean, 3.0);
        // t_{0.975, 4} = 2.7764451..., s = √2.5
        let expect = 2.776_445_105_197_799 * (2.5f64 / 5.0).sqrt();
        assert!((iv.half_width.unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn single_value_has_no_width() {
        let iv = t_interval(&[0.7], 0.95);
        assert_eq!(iv.half_width, None);
        assert_eq!((iv.lower(), iv.upper()), (0.7, 0.7));
    }

    #[test]
    fn overlap() {
        let a = Interval { n: 5, mean: 0.5, half_width: Some(0.1) };
        let b = Interval { n: 5, mean: 0.65, half_width: Some(0.06) };
        let c = Interval { n: 5, mean: 0.8, half_width: Some(0.05) };
        assert!(a.overlaps(&b));
        assert!(!a.overlaps(&c));
    }
}
