//! Property tests for structural invariants: simplex-valued grouping
//! parameters, partition of unity of masked features, sampler rows
//! summing to one, and entropy bounds.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use sfg_core::concrete::{entropy_of_row, gsm_sample, GroupingParams};
use sfg_core::sfg::{sfg_forward, SfgLayer};
use sfg_core::tensor::Tensor;

fn simplex_rows(k: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec([0.05f64..1.0, 0.05f64..1.0, 0.05f64..1.0], k).prop_map(|rows| {
        rows.into_iter()
            .map(|[a, b, c]| {
                let s = a + b + c;
                [a / s, b / s, c / s]
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn learned_probs_stay_on_the_simplex(rows in simplex_rows(5), seed in 0u64..1000) {
        let gp = GroupingParams::learned_rows(&rows).unwrap();
        let probs = gp.prob_rows().unwrap();
        for row in &probs {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
        // rows reproduce the requested probabilities
        for (a, b) in rows.iter().zip(&probs) {
            for g in 0..3 {
                prop_assert!((a[g] - b[g]).abs() < 1e-9);
            }
        }
        let _ = seed;
    }

    #[test]
    fn sample_rows_sum_to_one_soft_and_hard(
        rows in simplex_rows(4),
        tau in 0.05f64..2.0,
        seed in 0u64..1000,
        hard in any::<bool>(),
    ) {
        let gp = GroupingParams::learned_rows(&rows).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let s = gsm_sample(&gp, tau, &mut rng, hard).unwrap();
        let z = s.z.to_vec();
        for row in z.chunks(3) {
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-10);
            if hard {
                prop_assert!(row.iter().all(|&v| v == 0.0 || v == 1.0));
            }
        }
    }

    #[test]
    fn masked_features_partition_the_full_conv(
        rows in simplex_rows(3),
        tau in 0.05f64..2.0,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let kernels = Tensor::param(
            (0..3 * 2 * 9).map(|i| ((i * 31 + seed as usize) % 17) as f64 / 17.0 - 0.5).collect(),
            &[3, 2, 3, 3],
        ).unwrap();
        let layer = SfgLayer::new(kernels, GroupingParams::learned_rows(&rows).unwrap(), 1, 1).unwrap();
        let input = Tensor::from_vec(
            (0..2 * 2 * 25).map(|i| (i as f64 * 0.13).sin()).collect(),
            &[2, 2, 5, 5],
        ).unwrap();
        let sample = gsm_sample(&layer.grouping, tau, &mut rng, false).unwrap();
        let triple = sfg_forward(&layer, &input, &sample).unwrap();
        let full = input.conv2d(&layer.kernels, 1, 1).unwrap();
        let recon = triple.f1.add(&triple.fs).unwrap().add(&triple.f2).unwrap();
        for (a, b) in recon.to_vec().iter().zip(full.to_vec()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn entropy_is_bounded_by_ln3_and_zero(rows in simplex_rows(6)) {
        for row in &rows {
            let h = entropy_of_row(row);
            prop_assert!(h >= 0.0);
            prop_assert!(h <= 3f64.ln() + 1e-12);
        }
        prop_assert!(entropy_of_row(&[1.0, 0.0, 0.0]) == 0.0);
        let u = entropy_of_row(&[1.0 / 3.0; 3]);
        prop_assert!((u - 3f64.ln()).abs() < 1e-12);
    }
}
