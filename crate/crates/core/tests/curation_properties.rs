use asc_core::curation::*;
use ndarray::Array2;
use proptest::prelude::*;
use std::collections::HashSet;

fn records(vars: &[f64]) -> Vec<(String, f64)> {
    vars.iter().enumerate().map(|(i, &v)| (format!("seg{i:05}#0"), v)).collect()
}

fn variances() -> impl Strategy<Value = Vec<f64>> {
    // Small integer-valued grid so that ties are common.
    prop::collection::vec((0u32..50).prop_map(|v| v as f64 * 0.5), 1..1000)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_count_and_order(vars in variances(), ratio in 0.0f64..=1.0) {
        let recs = records(&vars);
        let r = cull_low_variance(&recs, ratio).unwrap();
        let n = recs.len();
        prop_assert_eq!(r.dropped_ids.len(), (ratio * n as f64 + 1e-9).floor() as usize);
        prop_assert_eq!(r.kept_ids.len() + r.dropped_ids.len(), n);
        let kept: HashSet<_> = r.kept_ids.iter().collect();
        prop_assert!(r.dropped_ids.iter().all(|d| !kept.contains(d)));
        // Kept ids keep input order.
        let positions: Vec<usize> = r.kept_ids.iter().map(|k| recs.iter().position(|(id, _)| id == k).unwrap()).collect();
        prop_assert!(positions.windows(2).all(|w| w[0] < w[1]));
        // Dropped are ascending by (variance, id) and never exceed any kept variance.
        let var = |id: &String| recs.iter().find(|(i, _)| i == id).unwrap().1;
        prop_assert!(r.dropped_ids.windows(2).all(|w| (var(&w[0]), &w[0]) <= (var(&w[1]), &w[1])));
        if let Some(max_drop) = r.dropped_ids.iter().map(var).reduce(f64::max) {
            prop_assert!(r.kept_ids.iter().all(|k| var(k) >= max_drop));
        }
    }

    #[test]
    fn larger_ratios_drop_supersets(vars in variances(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let recs = records(&vars);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small = cull_low_variance(&recs, lo).unwrap();
        let big = cull_low_variance(&recs, hi).unwrap();
        let big_set = big.dropped_set();
        prop_assert!(small.dropped_ids.iter().all(|d| big_set.contains(d.as_str())));
    }

    #[test]
    fn dropped_set_ignores_input_order(vars in variances(), ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let recs = records(&vars);
        let mut shuffled = recs.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let a = cull_low_variance(&recs, ratio).unwrap();
        let b = cull_low_variance(&shuffled, ratio).unwrap();
        prop_assert_eq!(a.dropped_ids, b.dropped_ids);
    }

    #[test]
    fn variance_matches_two_pass(rows in 1usize..12, cols in 1usize..12, offset in -1e4f64..1e4, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = Array2::from_shape_fn((rows, cols), |_| offset + rng.random_range(-3.0..3.0));
        let n = (rows * cols) as f64;
        let mean = data.sum() / n;
        let two_pass = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let got = sample_variance(&data).unwrap();
        prop_assert!((got - two_pass).abs() <= 1e-9 * two_pass.max(1.0), "{} vs {}", got, two_pass);
    }
}

#[test]
fn ratio_grid_on_a_thousand_records() {
    let vars: Vec<f64> = (0..1000).map(|i| ((i * 7919) % 1000) as f64).collect();
    let recs = records(&vars);
    for (ratio, expected) in [(0.0, 0), (0.01, 10), (0.1, 100), (0.2, 200)] {
        let r = cull_low_variance(&recs, ratio).unwrap();
        assert_eq!(r.dropped_ids.len(), expected, "ratio {ratio}");
    }
}
