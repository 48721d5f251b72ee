//! Worst-case inference for matched pairs under the Γ-model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, Normal};

use crate::error::{Error, Result};
use crate::score_stats::{score, ScoreSpec, ScoredSample};

/// κ values are kept inside `[KAPPA_EPS, 1 - KAPPA_EPS]`.
pub const KAPPA_EPS: f64 = 1e-12;
pub const BOOTSTRAP_RETRIES: usize = 100;

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).unwrap()
}

pub fn normal_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

pub fn normal_sf(x: f64) -> f64 {
    std_normal().sf(x)
}

/// `Φ⁻¹(1 − α)`.
pub fn z_upper(alpha: f64) -> f64 {
    -std_normal().inverse_cdf(alpha)
}

pub fn kappa_of(gamma: f64) -> f64 {
    gamma / (1.0 + gamma)
}

pub fn gamma_of(kappa: f64) -> f64 {
    kappa / (1.0 - kappa)
}

/// Normal-approximation upper bound on the p-value when the worst-case
/// success probability is `kappa`.
pub fn p_upper_at_kappa(s: &ScoredSample, kappa: f64) -> f64 {
    normal_sf((s.t - kappa) / (kappa * (1.0 - kappa) * s.var_ratio()).sqrt())
}

/// Exact upper tail `P(Bin(n, κ) ≥ #positive)` for equal scores.
pub fn exact_tail_at_kappa(s: &ScoredSample, kappa: f64) -> f64 {
    let k = s.n_positive() as u64;
    if k == 0 {
        return 1.0;
    }
    Binomial::new(kappa, s.n as u64).unwrap().sf(k - 1)
}

/// Upper and lower bounds on the one-sided p-value at `gamma`.
pub fn worst_case_p(s: &ScoredSample, gamma: f64, exact: bool) -> Result<(f64, f64)> {
    if !(gamma > 0.0) {
        return Err(Error::config(format!("gamma must be positive, got {gamma}")));
    }
    if exact && !s.equal_scores {
        return Err(Error::UnsupportedExact);
    }
    let f = if exact { exact_tail_at_kappa } else { p_upper_at_kappa };
    Ok((f(s, kappa_of(gamma)), f(s, kappa_of(1.0 / gamma))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Saturation {
    #[default]
    None,
    Low,
    High,
}

impl Saturation {
    pub fn is_saturated(self) -> bool {
        self != Saturation::None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensValue {
    pub kappa: f64,
    pub gamma: f64,
    pub saturated: Saturation,
}

impl SensValue {
    fn from_kappa(kappa: f64) -> Self {
        let (kappa, saturated) = if kappa <= KAPPA_EPS {
            (KAPPA_EPS, Saturation::Low)
        } else if kappa >= 1.0 - KAPPA_EPS {
            (1.0 - KAPPA_EPS, Saturation::High)
        } else {
            (kappa, Saturation::None)
        };
        SensValue { kappa, gamma: gamma_of(kappa), saturated }
    }
}

/// Root in κ of `T = κ + z·sqrt(κ(1−κ)·v)`, with `v = Σq²/(Σq)²`.
pub fn kappa_closed_form(t: f64, v: f64, z: f64) -> f64 {
    if z == 0.0 {
        return t;
    }
    let c = z * z * v;
    let disc = (c * c + 4.0 * c * t * (1.0 - t)).max(0.0).sqrt();
    if z > 0.0 {
        // smaller root, written via the product of roots to avoid cancellation
        let big = 2.0 * t + c + disc;
        if big == 0.0 {
            0.0
        } else {
            2.0 * t * t / big
        }
    } else {
        (2.0 * t + c + disc) / (2.0 * (1.0 + c))
    }
}

/// Sensitivity value at level `alpha` from the closed form.
pub fn sensitivity_value(s: &ScoredSample, alpha: f64) -> Result<SensValue> {
    check_alpha(alpha)?;
    Ok(SensValue::from_kappa(kappa_closed_form(s.t, s.var_ratio(), z_upper(alpha))))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("alpha must lie in (0,1), got {alpha}")))
    }
}

/// Sensitivity value by bisection on the (normal or exact) upper p-value.
pub fn sensitivity_value_bisect(s: &ScoredSample, alpha: f64, exact: bool, tol: f64) -> Result<SensValue> {
    check_alpha(alpha)?;
    if exact && !s.equal_scores {
        return Err(Error::UnsupportedExact);
    }
    let f = |k: f64| if exact { exact_tail_at_kappa(s, k) } else { p_upper_at_kappa(s, k) };
    let (mut lo, mut hi) = (KAPPA_EPS, 1.0 - KAPPA_EPS);
    if f(lo) >= alpha {
        return Ok(SensValue::from_kappa(0.0));
    }
    if f(hi) < alpha {
        return Ok(SensValue::from_kappa(1.0));
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if f(mid) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(SensValue::from_kappa(0.5 * (lo + hi)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityResult {
    pub gamma: f64,
    pub p_upper: f64,
    pub p_lower: f64,
    pub kappa_star: f64,
    pub gamma_star: f64,
    pub used_exact_tail: bool,
    pub saturated: Saturation,
}

/// Bounds at `gamma` together with the sensitivity value at `alpha`.
pub fn analyze_sample(s: &ScoredSample, gamma: f64, alpha: f64, exact: bool) -> Result<SensitivityResult> {
    let (p_upper, p_lower) = worst_case_p(s, gamma, exact)?;
    let sv = if exact {
        sensitivity_value_bisect(s, alpha, true, 1e-12)?
    } else {
        sensitivity_value(s, alpha)?
    };
    Ok(SensitivityResult {
        gamma,
        p_upper,
        p_lower,
        kappa_star: sv.kappa,
        gamma_star: sv.gamma,
        used_exact_tail: exact,
        saturated: sv.saturated,
    })
}

/// RNG for bootstrap replicate `b`: one ChaCha stream per replicate.
pub fn replicate_rng(seed: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapEstimate {
    pub sigma_f_hat: f64,
    pub b: usize,
    pub kappas: Vec<f64>,
    pub seed: u64,
}

impl BootstrapEstimate {
    pub fn mean(&self) -> f64 {
        self.kappas.iter().sum::<f64>() / self.kappas.len() as f64
    }
}

/// Draws `n` indices with replacement, redrawing while `degenerate` holds.
pub(crate) fn resample_indices(
    rng: &mut ChaCha8Rng,
    n: usize,
    degenerate: impl Fn(&[usize]) -> bool,
) -> Result<Vec<usize>> {
    let mut idx = vec![0; n];
    for _ in 0..=BOOTSTRAP_RETRIES {
        idx.iter_mut().for_each(|i| *i = rng.gen_range(0..n));
        if !degenerate(&idx) {
            return Ok(idx);
        }
    }
    Err(Error::Bootstrap(format!("{BOOTSTRAP_RETRIES} consecutive degenerate resamples")))
}

/// `√(n·var)` of a statistic over replicates, with an `n − 1` variance.
pub(crate) fn scaled_sd(values: &[f64], n: usize) -> f64 {
    if values.iter().all(|&v| v == values[0]) {
        return 0.0;
    }
    let b = values.len() as f64;
    let mean = values.iter().sum::<f64>() / b;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b - 1.0);
    (n as f64 * var).sqrt()
}

/// Pair bootstrap of the planning sensitivity value.
///
/// Replicate `b` draws from its own stream, so the result does not depend
/// on scheduling. `σ̂_F² = I_plan · var(κ_b)`.
pub fn bootstrap_sigma(y: &[f64], spec: &ScoreSpec, alpha_plan: f64, b: usize, seed: u64) -> Result<BootstrapEstimate> {
    if b < 2 {
        return Err(Error::config("bootstrap needs B >= 2"));
    }
    if y.is_empty() {
        return Err(Error::EmptyOutcome("planning differences".into()));
    }
    check_alpha(alpha_plan)?;
    let z = z_upper(alpha_plan);
    let n = y.len();
    let kappas = (0..b as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(seed, r);
            let idx = resample_indices(&mut rng, n, |idx| idx.iter().all(|&i| y[i] == 0.0))?;
            let yb: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let s = score(&yb, spec)?;
            Ok(SensValue::from_kappa(kappa_closed_form(s.t, s.var_ratio(), z)).kappa)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(BootstrapEstimate { sigma_f_hat: scaled_sd(&kappas, n), b, kappas, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Edgeworth {
    pub v: f64,
    pub c1: f64,
}

/// `g(x) = (x² − 1)/6`.
pub fn edgeworth_g(x: f64) -> f64 {
    (x * x - 1.0) / 6.0
}

/// The standardized statistic `V` and the first-order coefficient `c₁`.
///
/// `kappa_star` is the sample sensitivity value (κ scale) and `center` the
/// reference mean; both are supplied by the caller.
pub fn edgeworth_diagnostics(s: &ScoredSample, alpha: f64, sigma_f: f64, kappa_star: f64, center: f64) -> Edgeworth {
    let z = z_upper(alpha);
    let i = s.n as f64;
    let v = i.sqrt() * (kappa_star - center) / sigma_f
        + z * s.sigma_qi_sq.sqrt() / sigma_f * (kappa_star * (1.0 - kappa_star)).sqrt();
    Edgeworth { v, c1: s.c_qi * edgeworth_g(z) / sigma_f }
}

/// Sensitivity value with a Cornish–Fisher skewness correction to the
/// bounding quantile. The bounding sum has third cumulant proportional to
/// `κ(1−κ)(1−2κ)Σq³`, so for κ > 1/2 the correction raises κ*.
pub fn skew_corrected_kappa(s: &ScoredSample, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let z = z_upper(alpha);
    let v = s.var_ratio();
    let sum_q3: f64 = s.q.iter().map(|q| q * q * q).sum();
    let w = sum_q3 / (s.sum_q * s.sum_q2);
    let g = edgeworth_g(z);
    let h = |k: f64| s.t - k - z * (k * (1.0 - k) * v).sqrt() - (1.0 - 2.0 * k) * g * w;
    let (mut lo, mut hi) = (KAPPA_EPS, 1.0 - KAPPA_EPS);
    if h(lo) * h(hi) > 0.0 {
        return Ok(kappa_closed_form(s.t, v, z));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (h(mid) > 0.0) == (h(lo) > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score_stats::ScoreSpec;
    use approx::assert_relative_eq;

    fn wil(y: &[f64]) -> ScoredSample {
        score(y, &ScoreSpec::Wilcoxon).unwrap()
    }

    #[test]
    fn gamma_one_bounds_coincide() {
        let s = wil(&[1.0, -0.3, 2.0, 0.7, -1.1]);
        let (u, l) = worst_case_p(&s, 1.0, false).unwrap();
        assert_eq!(u, l);
        let k = score(&[1.0, -2.0, 3.0], &ScoreSpec::Sign).unwrap();
        let (u, l) = worst_case_p(&k, 1.0, true).unwrap();
        assert_eq!(u, l);
    }

    #[test]
    fn exact_binomial_oracle() {
        let y: Vec<f64> = (0..20).map(|i| if i < 17 { 1.0 } else { -1.0 }).collect();
        let s = score(&y, &ScoreSpec::Sign).unwrap();
        let (u, _) = worst_case_p(&s, 2.0, true).unwrap();
        // Σ_{k=17}^{20} C(20,k) (2/3)^k (1/3)^(20−k)
        let choose = |n: u64, k: u64| (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
        let want: f64 = (17..=20u64)
            .map(|k| choose(20, k) * (2.0f64 / 3.0).powi(k as i32) * (1.0f64 / 3.0).powi(20 - k as i32))
            .sum();
        assert_relative_eq!(u, want, max_relative = 1e-10);
        assert!(matches!(worst_case_p(&wil(&[1.0, 2.0]), 2.0, true), Err(Error::UnsupportedExact)));
    }

    #[test]
    fn below_worst_case_mean() {
        let y: Vec<f64> = (1..=400).map(|i| if i % 2 == 0 { i as f64 } else { -(i as f64) }).collect();
        let (u, _) = worst_case_p(&wil(&y), 2.0, false).unwrap();
        assert!(u > 0.5);
    }

    #[test]
    fn boundary_identity() {
        // T placed exactly on the boundary for κ = 1/2
        let s = wil(&[1.0, 2.0, -3.0, 4.0, 5.0, -6.0, 7.0]);
        let z = z_upper(0.05);
        let t = 0.5 + z * (0.25 * s.var_ratio()).sqrt();
        let k = kappa_closed_form(t, s.var_ratio(), z);
        assert_relative_eq!(k, 0.5, epsilon = 1e-12);
        assert_relative_eq!(gamma_of(k), 1.0, epsilon = 1e-11);
    }

    #[test]
    fn saturation_is_flagged() {
        let s = wil(&[-1.0, -2.0, -3.0]);
        let sv = sensitivity_value(&s, 0.05).unwrap();
        assert_eq!(sv.saturated, Saturation::Low);
        let s = wil(&[1.0, 2.0, 3.0]);
        let sv = sensitivity_value(&s, 0.7).unwrap();
        assert_eq!(sv.saturated, Saturation::High);
        let sv = sensitivity_value(&s, 0.05).unwrap();
        assert_eq!(sv.saturated, Saturation::None);
    }

    #[test]
    fn exact_sensitivity_matches_tail() {
        let y: Vec<f64> = (0..30).map(|i| if i < 24 { 1.0 } else { -1.0 }).collect();
        let s = score(&y, &ScoreSpec::Sign).unwrap();
        let sv = sensitivity_value_bisect(&s, 0.05, true, 1e-13).unwrap();
        assert_relative_eq!(exact_tail_at_kappa(&s, sv.kappa), 0.05, epsilon = 1e-8);
    }

    #[test]
    fn bootstrap_degenerate_and_deterministic() {
        let e = bootstrap_sigma(&[1.5; 12], &ScoreSpec::Wilcoxon, 0.05, 50, 9).unwrap();
        assert_eq!(e.sigma_f_hat, 0.0);
        let y = [0.3, -1.2, 2.2, 0.8, 1.1, -0.4, 0.9, 1.7];
        let a = bootstrap_sigma(&y, &ScoreSpec::Wilcoxon, 0.05, 40, 5).unwrap();
        let b = bootstrap_sigma(&y, &ScoreSpec::Wilcoxon, 0.05, 40, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.sigma_f_hat > 0.0);
        assert!(matches!(bootstrap_sigma(&[0.0, 0.0], &ScoreSpec::Wilcoxon, 0.05, 5, 1), Err(Error::Bootstrap(_))));
        assert!(bootstrap_sigma(&y, &ScoreSpec::Wilcoxon, 0.05, 1, 1).is_err());
    }

    #[test]
    fn edgeworth_simple_cases() {
        let s = score(&[1.0, -2.0, 3.0, 4.0], &ScoreSpec::Sign).unwrap();
        let alpha = normal_sf(1.0);
        let d = edgeworth_diagnostics(&s, alpha, 0.7, 0.6, 0.6);
        assert_relative_eq!(d.c1, 0.0, epsilon = 1e-9);
        let d = edgeworth_diagnostics(&s, 0.05, 0.7, 0.6, 0.6);
        assert_relative_eq!(d.c1, edgeworth_g(z_upper(0.05)) / 0.7);
    }

    #[test]
    fn skew_correction_tracks_exact_tail() {
        // sign scores: the corrected κ* sits nearer the exact-binomial value
        for &(n, k) in &[(100usize, 80usize), (400, 320), (2000, 1600)] {
            let y: Vec<f64> = (0..n).map(|i| if i < k { 1.0 } else { -1.0 }).collect();
            let mut s = score(&y, &ScoreSpec::Sign).unwrap();
            let exact = sensitivity_value_bisect(&s, 0.05, true, 1e-13).unwrap().kappa;
            // continuity correction, so both approximations target P(X ≥ k)
            s.t = (k as f64 - 0.5) / n as f64;
            let normal = sensitivity_value(&s, 0.05).unwrap().kappa;
            let skew = skew_corrected_kappa(&s, 0.05).unwrap();
            assert!(skew > normal);
            assert!((skew - exact).abs() < (normal - exact).abs());
        }
    }
}
