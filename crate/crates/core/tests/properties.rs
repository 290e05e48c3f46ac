use proptest::prelude::*;

use zsla_core::detector::{calibrate, pool_max, ResponseMap};
use zsla_core::evalkit::{
    ap_at_50, auroc, choose_threshold, harmonic_mean, indicator_targets, retrieval_order, t_interval,
};
use zsla_core::numerics::Tensor;
use zsla_core::synthesis::union;

fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(prop_oneof![(0u8..6).prop_map(|k| k as f64 / 5.0), 0.0f64..1.0], n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(s, mut l)| {
                l[0] = true;
                l[1] = false;
                (s, l)
            })
    })
}

fn nonneg_unit(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n)
        .prop_filter("non-zero", |v| v.iter().any(|x| *x > 1e-3))
        .prop_map(|v| {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

proptest! {
    #[test]
    fn auroc_counts_ordered_pairs((s, l) in scores_and_labels()) {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in (0..s.len()).filter(|&i| l[i]) {
            for j in (0..s.len()).filter(|&j| !l[j]) {
                pairs += 1.0;
                wins += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
            }
        }
        prop_assert!((auroc(&s, &l).unwrap() - wins / pairs).abs() < 1e-12);
    }

    #[test]
    fn auroc_of_negated_scores_is_complement((s, l) in scores_and_labels()) {
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        prop_assert!((auroc(&s, &l).unwrap() + auroc(&neg, &l).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_monotone_rescaling((s, l) in scores_and_labels(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let t: Vec<f64> = s.iter().map(|x| a * x + b).collect();
        prop_assert_eq!(auroc(&s, &l).unwrap(), auroc(&t, &l).unwrap());
        prop_assert_eq!(retrieval_order(&s), retrieval_order(&t));
        prop_assert_eq!(ap_at_50(&s, &l).unwrap(), ap_at_50(&t, &l).unwrap());
    }

    #[test]
    fn ap_lies_in_unit_interval((s, l) in scores_and_labels()) {
        let ap = ap_at_50(&s, &l).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
    }

    #[test]
    fn union_is_unit_nonnegative_and_symmetric(a in nonneg_unit(16), b in nonneg_unit(16)) {
        let u = union(&a, &b);
        prop_assert!(u.iter().all(|x| *x >= 0.0));
        prop_assert!((norm(&u) - 1.0).abs() < 1e-12);
        prop_assert_eq!(u, union(&b, &a));
    }

    #[test]
    fn union_with_itself_is_identity(a in nonneg_unit(16)) {
        let u = union(&a, &a);
        let again = union(&u, &u);
        for ((x, y), z) in a.iter().zip(&u).zip(&again) {
            prop_assert!((x - y).abs() < 1e-12 && (y - z).abs() < 1e-12);
        }
    }

    #[test]
    fn harmonic_mean_is_bounded(s in 0.0f64..=1.0, u in 0.0f64..=1.0) {
        let h = harmonic_mean(s, u);
        prop_assert!(h <= 0.5 * (s + u) + 1e-15);
        prop_assert!(h >= s.min(u) - 1e-15);
        if s == 0.0 || u == 0.0 {
            prop_assert_eq!(h, 0.0);
        }
    }

    #[test]
    fn interval_brackets_the_mean(v in prop::collection::vec(0.0f64..1.0, 2..12)) {
        let narrow = t_interval(&v, 0.8);
        let wide = t_interval(&v, 0.95);
        prop_assert!(narrow.lower() <= narrow.mean && narrow.mean <= narrow.upper());
        prop_assert!(wide.half_width.unwrap() >= narrow.half_width.unwrap());
    }

    #[test]
    fn separable_pools_reach_full_youden(pos in prop::collection::vec(0.6f64..1.0, 1..20), neg in prop::collection::vec(0.0f64..0.4, 1..20)) {
        let scores: Vec<f64> = pos.iter().chain(&neg).copied().collect();
        let labels: Vec<bool> = pos.iter().map(|_| true).chain(neg.iter().map(|_| false)).collect();
        let c = choose_threshold(&scores, &labels).unwrap();
        prop_assert_eq!(c.youden_j, 1.0);
        prop_assert!(!c.flagged);
        prop_assert!(pos.iter().all(|p| *p >= c.threshold) && neg.iter().all(|n| *n < c.threshold));
    }

    #[test]
    fn calibration_spans_plus_minus_gamma_squared(raw in -1.0f64..=1.0, gamma in 0.5f64..8.0) {
        let r = calibrate(raw, gamma);
        prop_assert!(r.abs() <= 3.0 * gamma * gamma + 1e-12);
        prop_assert!((calibrate(0.5, gamma)).abs() < 1e-12);
        prop_assert!((calibrate(1.0, gamma) - gamma * gamma).abs() < 1e-12);
    }

    #[test]
    fn max_pool_returns_the_channel_peak(w in 1usize..5, h in 1usize..5, n in 1usize..4, seed in any::<u64>()) {
        let cal: Vec<f64> = (0..w * h * n).map(|i| ((seed.wrapping_mul(i as u64 + 1) % 1000) as f64) / 100.0).collect();
        let map = ResponseMap::from_calibrated(w, h, n, cal.clone(), 5.0);
        let pooled = pool_max(&map);
        for k in 0..n {
            let peak = (0..w * h).map(|c| cal[c * n + k]).fold(f64::MIN, f64::max);
            prop_assert_eq!(pooled.logits[k], peak);
            let (i, j) = pooled.argmax[k];
            prop_assert_eq!(map.calibrated_at(i, j, k), peak);
        }
    }

    #[test]
    fn indicator_rows_are_one_hot(classes in prop::collection::vec(0usize..7, 1..30)) {
        let y = indicator_targets(&classes, 7).unwrap();
        for (i, &c) in classes.iter().enumerate() {
            prop_assert_eq!(y.row(i).sum(), 1.0);
            prop_assert_eq!(y[(i, c)], 1.0);
        }
    }

    #[test]
    fn transpose_is_an_involution(r in 1usize..6, c in 1usize..6, seed in any::<u32>()) {
        let data: Vec<f64> = (0..r * c).map(|i| (seed as f64 + i as f64).sin()).collect();
        let t = Tensor::matrix(r, c, data).unwrap();
        prop_assert_eq!(t.transpose().unwrap().transpose().unwrap(), t);
    }
}
