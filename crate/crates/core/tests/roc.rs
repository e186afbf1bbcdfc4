use proptest::prelude::*;
use tdd_core::eval::{auc_report, roc_series, AucReport};
use tdd_core::{BinaryMask, ScoreMap};

/// Brute force: for each threshold independently, count pixels at or above it.
fn oracle(scores: &[f64], gt: &[u8]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let u: Vec<f64> = scores
        .iter()
        .map(|&s| if hi > lo { (s - lo) / (hi - lo) } else { 0.0 })
        .collect();
    let mut uniq = u.clone();
    uniq.sort_by(|a, b| b.total_cmp(a));
    uniq.dedup();
    let n_a = gt.iter().filter(|&&g| g == 1).count() as f64;
    let n_b = gt.len() as f64 - n_a;
    let (mut t, mut pd, mut pf) = (vec![1.0], vec![0.0], vec![0.0]);
    for &th in &uniq {
        let mut a = 0;
        let mut b = 0;
        for (v, &g) in u.iter().zip(gt) {
            if *v >= th {
                if g == 1 {
                    a += 1
                } else {
                    b += 1
                }
            }
        }
        t.push(th);
        pd.push(a as f64 / n_a);
        pf.push(b as f64 / n_b);
    }
    (t, pd, pf)
}

fn trap(x: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 1..x.len() {
        s += (x[k] - x[k - 1]).abs() * (y[k] + y[k - 1]) / 2.0;
    }
    s
}

fn fixture() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..=64).prop_flat_map(|n| {
        (
            // coarse values so ties are common
            prop::collection::vec((0u8..12).prop_map(|v| v as f64 * 0.37 - 1.0), n),
            prop::collection::vec(0u8..2, n),
        )
    })
    .prop_filter("both classes", |(_, g)| g.contains(&0) && g.contains(&1))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_brute_force_oracle((s, g) in fixture()) {
        let n = s.len();
        let series = roc_series(&ScoreMap::new(1, n, s.clone()).unwrap(), &BinaryMask::new(1, n, g.clone()).unwrap()).unwrap();
        let (t, pd, pf) = oracle(&s, &g);
        prop_assert_eq!(&series.thresholds, &t);
        prop_assert_eq!(&series.p_d, &pd);
        prop_assert_eq!(&series.p_f, &pf);
        let r = auc_report(&series);
        prop_assert_eq!(r, AucReport::from_base(trap(&pf, &pd), trap(&t, &pd), trap(&t, &pf)));
    }

    #[test]
    fn invariant_under_increasing_transforms((s, g) in fixture(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let n = s.len();
        let gt = BinaryMask::new(1, n, g).unwrap();
        let base = roc_series(&ScoreMap::new(1, n, s.clone()).unwrap(), &gt).unwrap();
        let warped: Vec<f64> = s.iter().map(|v| (a * v + b).exp()).collect();
        let w = roc_series(&ScoreMap::new(1, n, warped).unwrap(), &gt).unwrap();
        prop_assert_eq!(&base.p_d, &w.p_d);
        prop_assert_eq!(&base.p_f, &w.p_f);
        let (r1, r2) = (auc_report(&base), auc_report(&w));
        prop_assert!((r1.auc_df - r2.auc_df).abs() < 1e-12);
    }

    #[test]
    fn perfect_detector_has_unit_area(g in prop::collection::vec(0u8..2, 2..40)) {
        prop_assume!(g.contains(&0) && g.contains(&1));
        let s: Vec<f64> = g.iter().map(|&v| v as f64).collect();
        let n = g.len();
        let r = auc_report(&roc_series(&ScoreMap::new(1, n, s).unwrap(), &BinaryMask::new(1, n, g).unwrap()).unwrap());
        prop_assert_eq!(r.auc_df, 1.0);
    }
}

#[test]
fn five_pixel_fixture() {
    let s = [0.2, 0.8, 0.5, 0.8, 0.0];
    let g = [0, 1, 1, 0, 0];
    let series = roc_series(&ScoreMap::new(1, 5, s.to_vec()).unwrap(), &BinaryMask::new(1, 5, g.to_vec()).unwrap()).unwrap();
    assert_eq!(series.thresholds, vec![1.0, 1.0, 0.625, 0.25, 0.0]);
    assert_eq!(series.p_d, vec![0.0, 0.5, 1.0, 1.0, 1.0]);
    assert_eq!(series.p_f, vec![0.0, 1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
}
