use proptest::prelude::*;

use sensplit::fullmatch::{separable_bounds, set_worst_case, set_worst_case_brute, statistic_full_values};
use sensplit::matched_data::{split_n, Direction};
use sensplit::score_stats::{moments, score, ScoreSpec};
use sensplit::screening::{
    analyze, guard_hyperparameters, plan_stats, select_with_stats, AlphaPolicy, Method, OutcomeData, Planning,
    ScreeningPlan,
};
use sensplit::sensitivity::{kappa_of, p_upper_at_kappa, sensitivity_value, worst_case_p, Saturation};

fn nonzero() -> impl Strategy<Value = f64> {
    prop_oneof![-50.0..-1e-3, 1e-3..50.0f64]
}

fn diffs(min: usize, max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(nonzero(), min..max)
}

fn spec() -> impl Strategy<Value = ScoreSpec> {
    prop_oneof![Just(ScoreSpec::Sign), Just(ScoreSpec::Wilcoxon), Just(ScoreSpec::Ustat { m: 5, lo: 4, hi: 5 })]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn statistic_in_unit_interval(y in diffs(1, 80), sp in spec()) {
        if let Ok(s) = score(&y, &sp) {
            prop_assert!((0.0..=1.0).contains(&s.t));
        }
    }

    #[test]
    fn sign_flip_complements(y in diffs(2, 80), sp in spec()) {
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        if let (Ok(a), Ok(b)) = (score(&y, &sp), score(&neg, &sp)) {
            prop_assert!((a.t + b.t - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn positive_rescaling_changes_nothing(y in diffs(2, 80), c in 1e-3..1e3f64) {
        let z: Vec<f64> = y.iter().map(|v| c * v).collect();
        let (a, b) = (score(&y, &ScoreSpec::Wilcoxon).unwrap(), score(&z, &ScoreSpec::Wilcoxon).unwrap());
        prop_assert_eq!(a.t, b.t);
        prop_assert_eq!(a.q, b.q);
    }

    #[test]
    fn permutation_leaves_statistic(y in diffs(2, 60), seed in any::<u64>()) {
        let mut p = y.clone();
        let n = p.len();
        // Fisher-Yates driven by a small LCG
        let mut s = seed | 1;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            p.swap(i, (s >> 33) as usize % (i + 1));
        }
        let (a, b) = (score(&y, &ScoreSpec::Wilcoxon).unwrap(), score(&p, &ScoreSpec::Wilcoxon).unwrap());
        prop_assert!((a.t - b.t).abs() < 1e-12);
        let (ka, kb) = (sensitivity_value(&a, 0.05).unwrap(), sensitivity_value(&b, 0.05).unwrap());
        prop_assert!((ka.kappa - kb.kappa).abs() < 1e-12);
    }

    #[test]
    fn score_moments_at_least_one(q in prop::collection::vec(0.0..10.0f64, 1..60)) {
        if let Ok((s2, c3)) = moments(&q) {
            prop_assert!(s2 >= 1.0 - 1e-12);
            prop_assert!(c3 >= s2 - 1e-9);
        }
    }

    #[test]
    fn bounds_monotone_in_gamma(y in diffs(5, 120), sp in spec()) {
        let Ok(s) = score(&y, &sp) else { return Ok(()) };
        let mut prev = (0.0, 1.0);
        for k in 0..=90 {
            let g = 1.0 + 0.1 * k as f64;
            let (up, low) = worst_case_p(&s, g, false).unwrap();
            prop_assert!(up >= prev.0 - 1e-15 && low <= prev.1 + 1e-15);
            prev = (up, low);
        }
    }

    #[test]
    fn sensitivity_value_is_the_boundary(y in diffs(10, 200)) {
        let s = score(&y, &ScoreSpec::Wilcoxon).unwrap();
        let sv = sensitivity_value(&s, 0.05).unwrap();
        if sv.saturated == Saturation::None {
            prop_assert!((p_upper_at_kappa(&s, sv.kappa) - 0.05).abs() < 1e-8);
        }
    }

    #[test]
    fn sensitivity_value_grows_with_alpha(y in diffs(10, 200)) {
        let s = score(&y, &ScoreSpec::Wilcoxon).unwrap();
        let g: Vec<f64> = [0.01, 0.05, 0.1, 0.25].iter().map(|&a| sensitivity_value(&s, a).unwrap().kappa).collect();
        prop_assert!(g.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn split_partitions(n in 2usize..500, r in 0.05..0.95f64, seed in any::<u64>()) {
        let Ok(sp) = split_n(n, r, seed) else { return Ok(()) };
        let mut all: Vec<usize> = sp.planning_ids.iter().chain(&sp.analysis_ids).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(sp.planning_ids.len(), (r * n as f64).round() as usize);
        prop_assert_eq!(split_n(n, r, seed).unwrap(), sp);
    }

    #[test]
    fn worst_case_top_k_is_optimal(t in prop::collection::vec(0.0..5.0f64, 2..7), g in 1.0..8.0f64) {
        let fast = set_worst_case(&t, g);
        let slow = set_worst_case_brute(&t, g);
        prop_assert_eq!(fast.0, slow.0);
        prop_assert!((fast.1 - slow.1).abs() < 1e-12);
    }

    #[test]
    fn separable_mean_monotone(sets in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 2..5), 3..25)) {
        let Ok(sc) = statistic_full_values(&sets, &ScoreSpec::Wilcoxon) else { return Ok(()) };
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=9 {
            let a = separable_bounds(&sc, 1.0 + k as f64).a_gamma;
            prop_assert!(a >= prev - 1e-12);
            prev = a;
        }
    }
}

fn planning(y: Vec<f64>, r: f64) -> Planning {
    let n = y.len() as f64;
    Planning { name: "y".into(), spec: ScoreSpec::Wilcoxon, direction: Direction::Positive, y, i_total: n / r, excluded: None }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// The analysis half never feeds back into the selection.
    #[test]
    fn selection_ignores_analysis_data(
        plans in prop::collection::vec(prop::collection::vec(-1.0..2.5f64, 20..40), 2..6),
        noise in prop::collection::vec(-5.0..5.0f64, 60),
        seed in any::<u64>(),
    ) {
        let plan = ScreeningPlan { bootstrap: 30, seed, ..ScreeningPlan::new(Method::Sensval, 1.3, 0.05) };
        let views: Vec<Planning> = plans.iter().cloned().map(|y| planning(y, plan.r)).collect();
        let stats = plan_stats(&views, &plan);
        let sel = select_with_stats(&stats, &plan).unwrap();
        let with = |analysis: Vec<f64>| -> Vec<OutcomeData> {
            views.iter().map(|p| OutcomeData { planning: p.clone(), analysis: analysis.clone() }).collect()
        };
        let a = analyze(&with(noise.clone()), &stats, &sel, &plan).unwrap();
        let b = analyze(&with(noise.iter().map(|v| v + 3.0).collect()), &stats, &sel, &plan).unwrap();
        prop_assert_eq!(a.selected, b.selected);
    }

    /// Guard-compliant settings: Sens-Val keeps everything the naive rule keeps.
    #[test]
    fn guarded_sensval_contains_naive(
        plans in prop::collection::vec(prop::collection::vec(-1.0..2.5f64, 20..60), 2..8),
        gamma in 1.0..3.0f64,
        seed in any::<u64>(),
    ) {
        let l = plans.len();
        prop_assume!(guard_hyperparameters(0.05, 0.05, 0.2, l).ok);
        let plan = ScreeningPlan {
            alpha_l: AlphaPolicy::Bonferroni,
            bootstrap: 30,
            seed,
            ..ScreeningPlan::new(Method::Sensval, gamma, 0.05)
        };
        let views: Vec<Planning> = plans.into_iter().map(|y| planning(y, plan.r)).collect();
        let stats = plan_stats(&views, &plan);
        let sv = select_with_stats(&stats, &plan).unwrap();
        let nv = select_with_stats(&stats, &ScreeningPlan { method: Method::Naive, ..plan.clone() }).unwrap();
        prop_assert!(nv.selected.iter().all(|j| sv.selected.contains(j)));
    }
}

#[test]
fn kappa_con_maps_gamma() {
    assert_eq!(kappa_of(1.0), 0.5);
    assert!((kappa_of(3.0) - 0.75).abs() < 1e-15);
}
