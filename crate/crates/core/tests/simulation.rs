use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sensplit::simulation::{
    gen_confounded, gen_randomized, greedy_caliper, fit_logistic, preset, run_experiment, standardized_differences,
    Assignment, GammaData, Matching, SimConfig, SimMethod, TreatedProp,
};

fn confounded(n: usize, d: usize, gamma_data: f64, prop: f64) -> SimConfig {
    SimConfig {
        n_subjects: n,
        d,
        n_outcomes: 3,
        n_signals: 1,
        tau: 1.0,
        gamma_con: gamma_data.max(1.0),
        assignment: Assignment::Confounded {
            gamma_data: GammaData::Fixed(gamma_data),
            treated: TreatedProp::Fixed(prop),
        },
        matching: Matching::Caliper(0.2),
        ..SimConfig::default()
    }
}

#[test]
fn paired_differences_have_mean_tau_and_variance_two() {
    let cfg = SimConfig { n_subjects: 2000, n_outcomes: 1, n_signals: 1, tau: 0.75, ..SimConfig::default() };
    let mut d = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    while d.len() < 100_000 {
        let s = gen_randomized(&cfg, &mut rng).unwrap();
        for set in &s.sets {
            d.push(set.units[0].values[0].unwrap() - set.units[1].values[0].unwrap());
        }
    }
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((mean - 0.75).abs() < 0.02, "{mean}");
    assert!((var - 2.0).abs() < 0.05, "{var}");
}

#[test]
fn randomized_preset_dimensions() {
    let cfg = preset("randomized").unwrap();
    assert_eq!((cfg.n_subjects, cfg.n_outcomes, cfg.n_signals, cfg.tau), (200, 20, 5, 0.75));
    let s = gen_randomized(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(s.n_outcomes(), 20);
    assert!(s.n_sets() <= 100 && s.n_sets() > 70);
}

#[test]
fn calibration_recovers_treated_fraction() {
    let cfg = confounded(5000, 5, 2.0, 0.3);
    for seed in 0..3 {
        let sub = gen_confounded(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let frac = sub.z.iter().filter(|&&z| z).count() as f64 / sub.z.len() as f64;
        assert!((frac - 0.3).abs() < 0.01, "{frac}");
    }
}

#[test]
fn matching_balances_covariates_without_confounding() {
    let cfg = confounded(5000, 5, 1.0, 0.4);
    let sub = gen_confounded(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let beta = fit_logistic(&sub.x, &sub.z, 50, 1e-8);
    let lp: Vec<f64> =
        sub.x.iter().map(|x| beta[0] + x.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>()).collect();
    let n = lp.len() as f64;
    let m = lp.iter().sum::<f64>() / n;
    let sd = (lp.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let pairs = greedy_caliper(&lp, &sub.z, 0.2 * sd);
    assert!(pairs.len() > 1000);
    for smd in standardized_differences(&sub, &pairs) {
        assert!(smd.abs() < 0.1, "{smd}");
    }
}

#[test]
fn matching_is_deterministic() {
    let cfg = confounded(800, 4, 1.5, 0.5);
    let a = sensplit::simulation::generate(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = sensplit::simulation::generate(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn estimates_do_not_depend_on_thread_count() {
    let cfg = SimConfig { reps: 12, bootstrap: 40, n_subjects: 120, n_outcomes: 8, ..preset("randomized-dynamic").unwrap() };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| run_experiment(&cfg).unwrap())
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a.estimates, b.estimates);
}

#[test]
fn single_replicate_flags_standard_errors() {
    let cfg = SimConfig { reps: 1, ..preset("randomized").unwrap() };
    let res = run_experiment(&cfg).unwrap();
    for e in &res.estimates {
        assert!(e.se_flag);
        assert_eq!(e.fwer_se, 0.0);
        assert_eq!(e.tpr_se, Some(0.0));
    }
}

#[test]
fn null_runs_report_no_tpr() {
    let cfg = SimConfig { reps: 60, bootstrap: 50, ..preset("null").unwrap() };
    let res = run_experiment(&cfg).unwrap();
    for e in &res.estimates {
        assert_eq!(e.tpr, None);
        assert!(e.fwer <= 0.05 + 2.0 * e.fwer_se + 0.05, "{e:?}");
    }
}

#[test]
fn oracle_dominates_and_sensval_beats_naive_when_sparse() {
    let cfg = SimConfig { reps: 150, bootstrap: 100, ..preset("sparse").unwrap() };
    let res = run_experiment(&cfg).unwrap();
    let get = |m| res.get(m).unwrap();
    let (o, s, n) = (get(SimMethod::Oracle), get(SimMethod::Sensval), get(SimMethod::Naive));
    assert!(o.tpr.unwrap() >= s.tpr.unwrap() - 2.0 * s.tpr_se.unwrap());
    assert!(s.tpr.unwrap() >= n.tpr.unwrap(), "sensval {:?} naive {:?}", s.tpr, n.tpr);
}

#[test]
fn confounded_replicates_run() {
    let cfg = SimConfig { reps: 4, bootstrap: 30, n_outcomes: 10, n_signals: 2, tau: 2.0, ..confounded(600, 6, 1.5, 0.5) };
    let res = run_experiment(&cfg).unwrap();
    assert_eq!(res.excluded, 0, "{:?}", res.errors);
}
