//! Sensitivity analysis and screening for full matching: sets with one
//! treated unit and several controls, or one control and several treated.
//!
//! Each set is stored as oriented values `v` with the lone unit first, so
//! the observed comparisons are `v[0] − v[k]`. Under the null the lone role
//! could fall on any unit `j`; the set's contribution would then be
//! `t_j = Σ_{k≠j} 1{v_j − v_k ≥ 0}·q(|v_j − v_k|)`. The worst case over
//! confounder allocations puts odds `Γ` on the top-k values of `t_j`.

use rayon::prelude::*;
use serde::Serialize;

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::matched_data::{Direction, MatchedSample, OutcomeKind, SplitHandle};
use crate::score_stats::ScoreSpec;
use crate::screening::{
    analyze_with, select_by, sensval_margin, Decision, Planning, PlanStats, ScreeningPlan,
    SelectionReport, StatChoice, Selection,
};
use crate::sensitivity::{kappa_of, normal_sf, replicate_rng, resample_indices, scaled_sd, z_upper, SensValue};

pub const GAMMA_MIN: f64 = 1e-3;
pub const GAMMA_MAX: f64 = 1e3;

/// Scores of every within-set comparison, observed and counterfactual.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FullMatchScored {
    /// Per set, the contribution `t_j` if unit `j` held the lone role;
    /// index 0 is the observed configuration.
    pub candidates: Vec<Vec<f64>>,
    /// Observed comparison scores, flattened over sets.
    pub q: Vec<f64>,
    pub t_g: f64,
    pub sum_q: f64,
    /// Sets with a nonzero observed score total.
    pub n_sets: usize,
    pub sigma_qi_sq: f64,
}

/// Score lookup built from the observed |comparisons|.
struct ScoreMap {
    abs: Vec<f64>,
    score: Vec<f64>,
    n: usize,
}

impl ScoreMap {
    fn new(observed: &[f64], spec: &ScoreSpec) -> ScoreMap {
        let mut abs: Vec<f64> = observed.iter().map(|v| v.abs()).filter(|&v| v > 0.0).collect();
        abs.sort_by(f64::total_cmp);
        let n = abs.len();
        let mut score = vec![0.0; n];
        let mut start = 0;
        while start < n {
            let mut end = start + 1;
            while end < n && abs[end] == abs[start] {
                end += 1;
            }
            let s = if spec.equal_scores() {
                1.0
            } else {
                (start + 1..=end).map(|p| spec.position_score(p, n)).sum::<f64>() / (end - start) as f64
            };
            score[start..end].iter_mut().for_each(|x| *x = s);
            start = end;
        }
        ScoreMap { abs, score, n }
    }

    fn q(&self, d: f64, spec: &ScoreSpec) -> f64 {
        let x = d.abs();
        if x == 0.0 || self.n == 0 {
            return 0.0;
        }
        let below = self.abs.partition_point(|&a| a < x);
        if below < self.n && self.abs[below] == x {
            return self.score[below];
        }
        spec.rank_score(below as f64 + 0.5, self.n)
    }
}

/// Scores oriented set values (lone unit first).
pub fn statistic_full_values(sets: &[Vec<f64>], spec: &ScoreSpec) -> Result<FullMatchScored> {
    let observed: Vec<f64> = sets.iter().flat_map(|v| v[1..].iter().map(move |x| v[0] - x)).collect();
    if matches!(spec, ScoreSpec::Mcnemar) && observed.iter().any(|d| d.abs() != 0.0 && d.abs() != 1.0) {
        return Err(Error::SpecMismatch("mcnemar needs differences in {-1, 0, 1}".into()));
    }
    let map = ScoreMap::new(&observed, spec);
    let mut q = Vec::with_capacity(observed.len());
    let mut candidates = Vec::with_capacity(sets.len());
    let mut n_sets = 0;
    for v in sets {
        let cand: Vec<f64> = (0..v.len())
            .map(|j| {
                (0..v.len())
                    .filter(|&k| k != j)
                    .map(|k| {
                        let d = v[j] - v[k];
                        if d >= 0.0 {
                            map.q(d, spec)
                        } else {
                            0.0
                        }
                    })
                    .sum()
            })
            .collect();
        let before = q.len();
        q.extend(v[1..].iter().map(|x| map.q(v[0] - x, spec)));
        if q[before..].iter().any(|&x| x > 0.0) {
            n_sets += 1;
        }
        candidates.push(cand);
    }
    let sum_q: f64 = q.iter().sum();
    if sum_q <= 0.0 {
        return Err(Error::EmptyOutcome("full-match comparisons".into()));
    }
    let observed_total: f64 = candidates.iter().map(|c| c[0]).sum();
    let (sigma_qi_sq, _) = crate::score_stats::moments(&q)?;
    Ok(FullMatchScored { candidates, q, t_g: observed_total / sum_q, sum_q, n_sets, sigma_qi_sq })
}

/// Oriented values for one outcome over `ids`: lone unit first, signs
/// arranged so that `v[0] − v[k]` is treated minus control times
/// `direction`. Sets with a missing lone value, or no usable comparison,
/// are dropped and counted.
pub fn oriented_sets(sample: &MatchedSample, outcome: usize, direction: Direction, ids: &[usize]) -> (Vec<Vec<f64>>, usize) {
    let mut out = Vec::with_capacity(ids.len());
    let mut dropped = 0;
    for &id in ids {
        let set = &sample.sets[id];
        let lone = set.lone();
        let s = direction.sign() * if set.lone_is_treated() { 1.0 } else { -1.0 };
        let Some(head) = set.units[lone].values[outcome] else {
            dropped += 1;
            continue;
        };
        let mut v = vec![s * head];
        v.extend(
            set.units
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != lone)
                .filter_map(|(_, u)| u.values[outcome].map(|x| s * x)),
        );
        if v.len() < 2 {
            dropped += 1;
            continue;
        }
        out.push(v);
    }
    (out, dropped)
}

/// Treated-minus-control comparisons for one outcome.
pub fn statistic_full(
    sample: &MatchedSample,
    outcome: usize,
    spec: &ScoreSpec,
    direction: Direction,
    ids: &[usize],
) -> Result<(FullMatchScored, usize)> {
    let (sets, dropped) = oriented_sets(sample, outcome, direction, ids);
    if sets.is_empty() {
        return Err(Error::EmptyOutcome(sample.outcome_names[outcome].clone()));
    }
    Ok((statistic_full_values(&sets, spec)?, dropped))
}

/// Mean and variance of one set's contribution when unit `j` takes the lone
/// role with odds proportional to `weights[j]`. Terms are summed in a
/// canonical order so equal multisets give identical results.
pub fn set_moments(t: &[f64], weights: &[f64]) -> (f64, f64) {
    let mut terms: Vec<(f64, f64)> = t.iter().copied().zip(weights.iter().copied()).collect();
    terms.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
    let w: f64 = terms.iter().map(|p| p.1).sum();
    let m1: f64 = terms.iter().map(|p| p.0 * p.1).sum::<f64>() / w;
    let m2: f64 = terms.iter().map(|p| p.0 * p.0 * p.1).sum::<f64>() / w;
    (m1, (m2 - m1 * m1).max(0.0))
}

fn better(cand: (f64, f64), best: (f64, f64)) -> bool {
    let tol = 1e-12 * cand.0.abs().max(best.0.abs()).max(1.0);
    cand.0 > best.0 + tol || ((cand.0 - best.0).abs() <= tol && cand.1 > best.1)
}

/// Worst-case mean and variance of a set's contribution at `gamma`,
/// searching allocations with odds `gamma` on the top-k candidates.
pub fn set_worst_case(t: &[f64], gamma: f64) -> (f64, f64) {
    let n = t.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| t[b].total_cmp(&t[a]));
    let mut weights = vec![1.0; n];
    let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &j in order.iter().take(n - 1) {
        weights[j] = gamma;
        let m = set_moments(t, &weights);
        if better(m, best) {
            best = m;
        }
    }
    best
}

/// Exhaustive search over every allocation of odds in `{1, gamma}`.
pub fn set_worst_case_brute(t: &[f64], gamma: f64) -> (f64, f64) {
    let n = t.len();
    let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for mask in 0u64..(1 << n) {
        let w: Vec<f64> = (0..n).map(|j| if mask >> j & 1 == 1 { gamma } else { 1.0 }).collect();
        let m = set_moments(t, &w);
        if better(m, best) {
            best = m;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeparableBounds {
    /// Worst-case mean of `T_g`.
    pub a_gamma: f64,
    /// Scale with `sd(T_g) ≈ b_gamma/√I`.
    pub b_gamma: f64,
    /// `Σ_i var_i`, the unnormalized variance.
    pub var_sum: f64,
}

pub fn separable_bounds(scored: &FullMatchScored, gamma: f64) -> SeparableBounds {
    let (mut mean, mut var) = (0.0, 0.0);
    for c in &scored.candidates {
        let (m, v) = set_worst_case(c, gamma);
        mean += m;
        var += v;
    }
    let i = scored.n_sets as f64;
    SeparableBounds {
        a_gamma: mean / scored.sum_q,
        b_gamma: (i * var).sqrt() / scored.sum_q,
        var_sum: var,
    }
}

/// Separable normal approximation to the worst-case p-value at `gamma`.
pub fn worst_case_p_full(scored: &FullMatchScored, gamma: f64) -> f64 {
    let b = separable_bounds(scored, gamma);
    normal_sf((scored.t_g - b.a_gamma) / (b.var_sum.sqrt() / scored.sum_q))
}

/// Sensitivity value by log-scale bisection of
/// `T_g − a_Γ = z_α·b_Γ/√I` over `[GAMMA_MIN, GAMMA_MAX]`.
pub fn sensitivity_value_full(scored: &FullMatchScored, alpha: f64) -> Result<SensValue> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("alpha must lie in (0,1), got {alpha}")));
    }
    let z = z_upper(alpha);
    let h = |g: f64| {
        let b = separable_bounds(scored, g);
        scored.t_g - b.a_gamma - z * b.var_sum.sqrt() / scored.sum_q
    };
    let sat = |gamma: f64, low: bool| SensValue {
        kappa: kappa_of(gamma),
        gamma,
        saturated: if low { crate::sensitivity::Saturation::Low } else { crate::sensitivity::Saturation::High },
    };
    if h(GAMMA_MIN) <= 0.0 {
        return Ok(sat(GAMMA_MIN, true));
    }
    if h(GAMMA_MAX) > 0.0 {
        return Ok(sat(GAMMA_MAX, false));
    }
    let (mut lo, mut hi) = (GAMMA_MIN.ln(), GAMMA_MAX.ln());
    while hi - lo > 1e-11 {
        let mid = 0.5 * (lo + hi);
        if h(mid.exp()) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let gamma = (0.5 * (lo + hi)).exp();
    Ok(SensValue { kappa: kappa_of(gamma), gamma, saturated: Default::default() })
}

/// Scale on which the full-matching selection rule compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FullScale {
    /// `Γ*` against `Γ_con`, bias from the bootstrap mean.
    #[default]
    Gamma,
    /// `κ*` against `κ_con` with the pair-mode bias term.
    Kappa,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullPlanning {
    pub name: String,
    pub spec: ScoreSpec,
    pub direction: Direction,
    pub sets: Vec<Vec<f64>>,
    pub i_total: f64,
    pub excluded: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullOutcomeData {
    pub planning: FullPlanning,
    pub analysis: Vec<Vec<f64>>,
}

/// Per-outcome oriented planning/analysis sets for a full-match sample.
pub fn prepare_full(
    sample: &MatchedSample,
    split: &SplitHandle,
    stat: &StatChoice,
    direction: Option<Direction>,
) -> Vec<FullOutcomeData> {
    let r_eff = split.r_eff();
    (0..sample.n_outcomes())
        .map(|l| {
            let name = sample.outcome_names[l].clone();
            let spec = match (stat, sample.outcome_kinds[l]) {
                (StatChoice::Auto, OutcomeKind::Binary) => ScoreSpec::Mcnemar,
                _ => stat.for_kind(sample.outcome_kinds[l]),
            };
            let (pos, _) = oriented_sets(sample, l, Direction::Positive, &split.planning_ids);
            let dir = direction.unwrap_or_else(|| {
                let diffs: Vec<f64> = pos.iter().flat_map(|v| v[1..].iter().map(move |x| v[0] - x)).collect();
                if diffs.is_empty() {
                    Direction::Positive
                } else {
                    crate::matched_data::direction_of(&diffs)
                }
            });
            let (sets, _) = oriented_sets(sample, l, dir, &split.planning_ids);
            let (analysis, _) = oriented_sets(sample, l, dir, &split.analysis_ids);
            let excluded = sets.is_empty().then(|| "no planning data".to_string());
            FullOutcomeData {
                planning: FullPlanning { name, spec, direction: dir, i_total: sets.len() as f64 / r_eff, sets, excluded },
                analysis,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FullPlanStats {
    pub stats: PlanStats,
    pub gamma_plan: f64,
    /// Bootstrap bias term `√I_plan·(Γ*_plan − mean Γ*_b)` on the chosen scale.
    pub mu_hat: Option<f64>,
}

fn full_plan_stats(p: &FullPlanning, plan: &ScreeningPlan, scale: FullScale, seed: Option<u64>) -> FullPlanStats {
    let excluded = |n: usize, why: String| FullPlanStats {
        stats: PlanStats {
            n_plan: n,
            i_total: 0.0,
            t: f64::NAN,
            var_ratio: f64::NAN,
            sigma_q: f64::NAN,
            kappa: SensValue { kappa: f64::NAN, gamma: f64::NAN, saturated: Default::default() },
            sigma_f: None,
            boot_mean: None,
            note: Some(why),
        },
        gamma_plan: f64::NAN,
        mu_hat: None,
    };
    if let Some(why) = &p.excluded {
        return excluded(0, why.clone());
    }
    let n = p.sets.len();
    let scored = match statistic_full_values(&p.sets, &p.spec) {
        Ok(s) => s,
        Err(e) => return excluded(n, e.to_string()),
    };
    let sv = sensitivity_value_full(&scored, plan.alpha_plan).expect("validated alpha_plan");
    let on_scale = |v: SensValue| match scale {
        FullScale::Gamma => v.gamma,
        FullScale::Kappa => v.kappa,
    };
    let mut note = sv.saturated.is_saturated().then(|| format!("gamma saturated {:?}", sv.saturated));
    let Some(seed) = seed else {
        return FullPlanStats {
            stats: PlanStats {
                n_plan: n,
                i_total: p.i_total,
                t: scored.t_g,
                var_ratio: scored.sigma_qi_sq / scored.n_sets as f64,
                sigma_q: scored.sigma_qi_sq.sqrt(),
                kappa: sv,
                sigma_f: None,
                boot_mean: None,
                note,
            },
            gamma_plan: sv.gamma,
            mu_hat: None,
        };
    };
    let boot: Result<Vec<f64>> = (0..plan.bootstrap as u64)
        .map(|b| {
            let mut rng = replicate_rng(seed, b);
            let idx = resample_indices(&mut rng, n, |idx| {
                idx.iter().all(|&i| p.sets[i][1..].iter().all(|x| p.sets[i][0] == *x))
            })?;
            let sets: Vec<Vec<f64>> = idx.iter().map(|&i| p.sets[i].clone()).collect();
            let s = statistic_full_values(&sets, &p.spec)?;
            Ok(on_scale(sensitivity_value_full(&s, plan.alpha_plan)?))
        })
        .collect();
    let (sigma_f, boot_mean, mu_hat) = match boot {
        Ok(v) => {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let mu = (n as f64).sqrt() * (on_scale(sv) - mean);
            (Some(scaled_sd(&v, n)), Some(mean), Some(mu))
        }
        Err(e) => {
            note = Some(format!("bootstrap failed, naive fallback: {e}"));
            (None, None, None)
        }
    };
    FullPlanStats {
        stats: PlanStats {
            n_plan: n,
            i_total: p.i_total,
            t: scored.t_g,
            var_ratio: scored.sigma_qi_sq / scored.n_sets as f64,
            sigma_q: scored.sigma_qi_sq.sqrt(),
            kappa: sv,
            sigma_f,
            boot_mean,
            note,
        },
        gamma_plan: sv.gamma,
        mu_hat,
    }
}

/// Selection rule for one full-matching outcome.
pub fn decide_full(fs: &FullPlanStats, plan: &ScreeningPlan, scale: FullScale, alpha_l: f64, naive_p: f64) -> Decision {
    let st = &fs.stats;
    if !st.usable() {
        return crate::screening::NOT_SELECTED;
    }
    let Some(sf) = st.sigma_f else {
        let margin = plan.alpha - naive_p;
        return Decision { selected: margin >= 0.0, margin, fallback_naive: true };
    };
    let margin = match scale {
        FullScale::Kappa => sensval_margin(st, sf, plan, alpha_l),
        FullScale::Gamma => {
            let (i, r) = (st.i_total, plan.r);
            let mu = fs.mu_hat.unwrap_or(0.0);
            let lhs = fs.gamma_plan
                + mu / i.sqrt() * (z_upper(plan.alpha_plan) / r.sqrt() - z_upper(alpha_l) / (1.0 - r).sqrt());
            let rhs = plan.gamma_con - sf * z_upper(plan.alpha_coverage) / (i * r * (1.0 - r)).sqrt();
            lhs - rhs
        }
    };
    Decision { selected: margin > 0.0, margin, fallback_naive: false }
}

/// Sens-Val selection for full matching. Planning statistics are returned
/// with the selection for reporting.
pub fn sensval_select_full(
    planning: &[FullPlanning],
    plan: &ScreeningPlan,
    scale: FullScale,
) -> Result<(Vec<FullPlanStats>, Selection)> {
    plan.validate()?;
    let stats: Vec<FullPlanStats> = planning
        .par_iter()
        .enumerate()
        .map(|(l, p)| full_plan_stats(p, plan, scale, Some(derive_seed(plan.seed, l as u64))))
        .collect();
    let naive_p: Vec<f64> = planning
        .iter()
        .zip(&stats)
        .map(|(p, s)| {
            if !s.stats.usable() {
                return f64::NAN;
            }
            statistic_full_values(&p.sets, &p.spec).map(|sc| worst_case_p_full(&sc, plan.gamma_con)).unwrap_or(f64::NAN)
        })
        .collect();
    let sel = select_by(stats.len(), plan, |i, a| decide_full(&stats[i], plan, scale, a, naive_p[i]))?;
    Ok((stats, sel))
}

/// Naive selection for full matching: planning worst-case p at `Γ_con` ≤ α.
pub fn naive_select_full(planning: &[FullPlanning], plan: &ScreeningPlan) -> Result<Selection> {
    let naive = ScreeningPlan { method: crate::screening::Method::Naive, ..plan.clone() };
    let p: Vec<Option<f64>> = planning
        .iter()
        .map(|o| statistic_full_values(&o.sets, &o.spec).ok().map(|s| worst_case_p_full(&s, plan.gamma_con)))
        .collect();
    select_by(planning.len(), &naive, |i, _| match p[i] {
        Some(pv) => {
            let m = plan.alpha - pv;
            Decision { selected: m >= 0.0, margin: m, fallback_naive: false }
        }
        None => crate::screening::NOT_SELECTED,
    })
}

/// Screens full-match outcomes and tests the selection on the analysis sets.
pub fn screen_full(outcomes: &[FullOutcomeData], plan: &ScreeningPlan, scale: FullScale) -> Result<SelectionReport> {
    let planning: Vec<FullPlanning> = outcomes.iter().map(|o| o.planning.clone()).collect();
    let (stats, sel) = match plan.method {
        crate::screening::Method::Naive => {
            let sel = naive_select_full(&planning, plan)?;
            let st = planning.iter().map(|p| full_plan_stats(p, plan, scale, None)).collect();
            (st, sel)
        }
        _ => sensval_select_full(&planning, plan, scale)?,
    };
    let plain: Vec<PlanStats> = stats.iter().map(|s| s.stats.clone()).collect();
    let views: Vec<Planning> = planning
        .iter()
        .map(|p| Planning {
            name: p.name.clone(),
            spec: p.spec.clone(),
            direction: p.direction,
            y: Vec::new(),
            i_total: p.i_total,
            excluded: p.excluded.clone(),
        })
        .collect();
    let n_analysis: Vec<usize> = outcomes.iter().map(|o| o.analysis.len()).collect();
    analyze_with(&sel, &plain, &views, &n_analysis, plan, |l| {
        let o = &outcomes[l];
        if o.analysis.is_empty() {
            return Err(Error::EmptyOutcome(o.planning.name.clone()));
        }
        Ok(worst_case_p_full(&statistic_full_values(&o.analysis, &o.planning.spec)?, plan.gamma_con))
    })
}
