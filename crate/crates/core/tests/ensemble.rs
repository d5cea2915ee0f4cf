use proptest::prelude::*;
use reefcond::ensemble::{ensemble_average, threshold_decide, DecisionConfig, PredictionSet, ProbabilityMatrix};
use reefcond::LabelSchema;

fn matrix(ids: &[String], values: Vec<f64>) -> ProbabilityMatrix {
    ProbabilityMatrix::new(ids.to_vec(), 8, values).unwrap()
}

fn members(k: usize) -> impl Strategy<Value = (Vec<String>, Vec<Vec<f64>>)> {
    (1usize..12).prop_flat_map(move |rows| {
        let ids: Vec<String> = (0..rows).map(|i| format!("p{i:02}")).collect();
        (Just(ids), proptest::collection::vec(proptest::collection::vec(0.0f64..=1.0, rows * 8), k))
    })
}

fn by_id(m: &ProbabilityMatrix) -> std::collections::BTreeMap<String, Vec<u64>> {
    m.iter().map(|(id, row)| (id.to_string(), row.iter().map(|v| v.to_bits()).collect())).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn mean_is_bounded_and_order_free((ids, vals) in members(3), perm in Just(vec![0usize, 1, 2]).prop_shuffle()) {
        let ms: Vec<ProbabilityMatrix> = vals.iter().map(|v| matrix(&ids, v.clone())).collect();
        let avg = ensemble_average(&ms).unwrap();
        for (cell, &v) in avg.values().iter().enumerate() {
            let lo = ms.iter().map(|m| m.values()[cell]).fold(f64::INFINITY, f64::min);
            let hi = ms.iter().map(|m| m.values()[cell]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= v && v <= hi);
        }
        let reordered: Vec<ProbabilityMatrix> = perm.iter().map(|&i| ms[i].clone()).collect();
        prop_assert_eq!(by_id(&ensemble_average(&reordered).unwrap()), by_id(&avg));
    }

    #[test]
    fn identical_members_are_fixed_points((ids, vals) in members(1), k in 1usize..6) {
        let m = matrix(&ids, vals[0].clone());
        let avg = ensemble_average(&vec![m.clone(); k]).unwrap();
        for (a, b) in avg.values().iter().zip(m.values()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn shuffled_rows_align_by_id((ids, vals) in members(2), seed in any::<u64>()) {
        use rand::{seq::SliceRandom, SeedableRng};
        let a = matrix(&ids, vals[0].clone());
        let mut rows: Vec<(String, Vec<f64>)> = matrix(&ids, vals[1].clone()).iter().map(|(i, r)| (i.to_string(), r.to_vec())).collect();
        rows.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let b = ProbabilityMatrix::from_rows(rows).unwrap();
        let avg = ensemble_average(&[a.clone(), b.clone()]).unwrap();
        prop_assert_eq!(avg.ids(), a.ids());
        prop_assert_eq!(by_id(&avg), by_id(&ensemble_average(&[b, a]).unwrap()));
    }

    #[test]
    fn prediction_file_round_trip((ids, vals) in members(1), tau in 0.05f64..0.95) {
        let schema = LabelSchema::coral();
        let m = matrix(&ids, vals[0].clone());
        let cfg = DecisionConfig::new(tau).unwrap();
        let set = PredictionSet::new(tau, threshold_decide(&m, &cfg).unwrap());
        let first = set.to_bytes(&schema).unwrap();
        let back = PredictionSet::read_from(first.as_slice(), &schema).unwrap();
        let second = back.to_bytes(&schema).unwrap();
        prop_assert_eq!(&first, &second);
        for (orig, read) in set.records.iter().zip(&back.records) {
            for (p, q) in orig.probs.iter().zip(&read.probs) {
                prop_assert!((p - q).abs() <= 5e-7);
            }
        }
    }
}
