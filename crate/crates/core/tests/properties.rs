use proptest::prelude::*;
use relapse_core::datamodel::{Label, Split};
use relapse_core::forecasting::daily_uncertainty;
use relapse_core::multitask::combine_variance;
use relapse_core::synth::{default_profiles, generate_patient, inject_relapse, NoiseKind, Severity};
use relapse_core::training::ensemble_stats;

fn predictions() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..6, 1usize..5).prop_flat_map(|(k, d)| prop::collection::vec(prop::collection::vec(-10.0f64..10.0, d), k))
}

proptest! {
    #[test]
    fn window_uncertainty_is_non_negative(preds in predictions()) {
        let refs: Vec<&[f64]> = preds.iter().map(|p| p.as_slice()).collect();
        prop_assert!(ensemble_stats(&refs).u >= 0.0);
    }

    #[test]
    fn identical_heads_have_zero_uncertainty_and_their_own_mean(
        head in prop::collection::vec(-10.0f64..10.0, 1..5),
        k in 2usize..6,
    ) {
        let refs: Vec<&[f64]> = (0..k).map(|_| head.as_slice()).collect();
        let out = ensemble_stats(&refs);
        prop_assert_eq!(out.u, 0.0);
        for (m, h) in out.mean.iter().zip(&head) {
            prop_assert!((m - h).abs() <= 1e-12 * h.abs().max(1.0));
        }
    }

    #[test]
    fn disagreeing_heads_have_positive_uncertainty(preds in predictions(), j in 0usize..4, bump in 0.01f64..1.0) {
        let mut preds = preds;
        let j = j % preds[0].len();
        preds[1][j] = preds[0][j] + bump;
        let refs: Vec<&[f64]> = preds.iter().map(|p| p.as_slice()).collect();
        prop_assert!(ensemble_stats(&refs).u > 0.0);
    }

    #[test]
    fn day_uncertainty_ignores_window_order(u in prop::collection::vec(0.0f64..5.0, 1..40), seed in any::<u64>()) {
        let mut shuffled = u.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed.wrapping_mul(i as u64 + 1) % (i as u64 + 1)) as usize);
        }
        let (a, b) = (daily_uncertainty(&u).unwrap(), daily_uncertainty(&shuffled).unwrap());
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn combined_variance_is_monotone(t in 0.0f64..5.0, s in 0.0f64..5.0, dt in 0.0f64..1.0, ds in 0.0f64..1.0) {
        let base = combine_variance(t, s, 0.3, 0.7).combined;
        prop_assert!(combine_variance(t + dt, s, 0.3, 0.7).combined >= base);
        prop_assert!(combine_variance(t, s + ds, 0.3, 0.7).combined >= base);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn injection_touches_only_targeted_days(seed in any::<u64>(), start in 20i64..30, len in 1i64..8) {
        let profile = &default_profiles()[0];
        let clean = generate_patient(profile, 20, 20, 10, seed, NoiseKind::Gaussian).unwrap();
        let mut sick = clean.clone();
        let end = start + len;
        inject_relapse(&mut sick, &[Severity::Moderate.regime(start, end)], seed).unwrap();
        for (c, s) in clean.iter().zip(&sick) {
            if (start..end).contains(&c.date_index) {
                prop_assert_eq!(s.label, Label::Relapse);
                prop_assert_ne!(format!("{:?}", c.slots), format!("{:?}", s.slots));
            } else {
                // Debug text is exact for f64 and treats NaN placeholders as equal.
                prop_assert_eq!(format!("{c:?}"), format!("{s:?}"));
            }
        }
        prop_assert!(sick.iter().filter(|d| d.split == Split::Train).all(|d| d.label == Label::Remission));
    }
}
