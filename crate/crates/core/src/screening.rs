//! Outcome screening on the planning sample and testing on the analysis
//! sample.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::matched_data::{differences, direction_of, Direction, MatchedSample, OutcomeKind, SplitHandle};
use crate::score_stats::{score, ScoreSpec};
use crate::sensitivity::{
    bootstrap_sigma, kappa_of, normal_cdf, normal_sf, p_upper_at_kappa, sensitivity_value, z_upper, SensValue,
};

pub const DYNAMIC_MAX_ROUNDS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Naive,
    Sensval,
    Approx,
    SensvalFull,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Method::Naive),
            "sensval" | "sens-val" => Ok(Method::Sensval),
            "approx" => Ok(Method::Approx),
            "sensval_full" | "sensval-full" => Ok(Method::SensvalFull),
            _ => Err(Error::config(format!("unknown method `{s}`"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Naive => "naive",
            Method::Sensval => "sensval",
            Method::Approx => "approx",
            Method::SensvalFull => "sensval_full",
        })
    }
}

/// How per-outcome analysis levels `α_l` are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaPolicy {
    /// One level per outcome, or a single level for all.
    Fixed(Vec<f64>),
    /// Select at `α/L`, test at `α/|S|`.
    Bonferroni,
    /// Iterate `α_l = α/|S|` to a fixed point.
    Dynamic,
}

impl FromStr for AlphaPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bonferroni" => Ok(AlphaPolicy::Bonferroni),
            "dynamic" => Ok(AlphaPolicy::Dynamic),
            _ => {
                let rest = s
                    .strip_prefix("fixed:")
                    .ok_or_else(|| Error::config(format!("unknown alpha-l policy `{s}`")))?;
                let v = rest
                    .split(',')
                    .map(|x| x.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::config(format!("bad fixed levels `{rest}`")))?;
                Ok(AlphaPolicy::Fixed(v))
            }
        }
    }
}

/// Variance term in the approximate rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ApproxRule {
    /// `σ̂·g·√(1/(1−r) + 1/r)·z/√I`.
    #[default]
    Consistent,
    /// `σ̂²·((1−r)g² + r·f'²)·z/√I`, as displayed with the method.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningPlan {
    pub gamma_con: f64,
    pub alpha: f64,
    pub alpha_plan: f64,
    pub alpha_coverage: f64,
    pub alpha_l: AlphaPolicy,
    /// Planning fraction used in the selection inequality.
    pub r: f64,
    pub bootstrap: usize,
    pub method: Method,
    pub seed: u64,
    pub approx_rule: ApproxRule,
}

impl ScreeningPlan {
    /// Defaults: `α_plan = α_coverage = α`, dynamic levels, `r = 0.2`, `B = 250`.
    pub fn new(method: Method, gamma_con: f64, alpha: f64) -> Self {
        ScreeningPlan {
            gamma_con,
            alpha,
            alpha_plan: alpha,
            alpha_coverage: alpha,
            alpha_l: AlphaPolicy::Dynamic,
            r: 0.2,
            bootstrap: 250,
            method,
            seed: 0,
            approx_rule: ApproxRule::Consistent,
        }
    }

    pub fn kappa_con(&self) -> f64 {
        kappa_of(self.gamma_con)
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must lie in (0,1), got {v}")))
            }
        };
        prob("alpha", self.alpha)?;
        prob("alpha_plan", self.alpha_plan)?;
        prob("alpha_coverage", self.alpha_coverage)?;
        prob("r", self.r)?;
        if !(self.gamma_con >= 1.0) {
            return Err(Error::config(format!("gamma_con must be >= 1, got {}", self.gamma_con)));
        }
        if let AlphaPolicy::Fixed(v) = &self.alpha_l {
            if v.is_empty() || v.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
                return Err(Error::config("fixed alpha-l levels must lie in (0,1)"));
            }
        }
        if matches!(self.method, Method::Sensval | Method::Approx | Method::SensvalFull) && self.bootstrap < 2 {
            return Err(Error::config("bootstrap needs B >= 2"));
        }
        Ok(())
    }
}

/// Choice of statistic per outcome.
#[derive(Debug, Clone, PartialEq)]
pub enum StatChoice {
    /// Wilcoxon for continuous outcomes, McNemar for binary ones.
    Auto,
    All(ScoreSpec),
}

impl StatChoice {
    pub fn for_kind(&self, kind: OutcomeKind) -> ScoreSpec {
        match (self, kind) {
            (StatChoice::All(s), _) => s.clone(),
            (StatChoice::Auto, OutcomeKind::Binary) => ScoreSpec::Mcnemar,
            (StatChoice::Auto, OutcomeKind::Continuous) => ScoreSpec::Wilcoxon,
        }
    }
}

impl FromStr for StatChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            Ok(StatChoice::Auto)
        } else {
            s.parse().map(StatChoice::All)
        }
    }
}

/// Planning-sample view of one outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Planning {
    pub name: String,
    pub spec: ScoreSpec,
    pub direction: Direction,
    /// Direction-adjusted planning differences.
    pub y: Vec<f64>,
    /// Total pair count `I` used in the selection inequality.
    pub i_total: f64,
    /// Set when the outcome cannot be screened.
    pub excluded: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeData {
    pub planning: Planning,
    /// Direction-adjusted analysis differences.
    pub analysis: Vec<f64>,
}

/// Builds per-outcome planning/analysis differences from a pair sample.
///
/// With `direction = None` the sign is estimated on the planning sample.
/// `I` for each outcome is its retained planning count divided by the
/// realized planning fraction, so it depends on planning data only.
pub fn prepare_pairs(
    sample: &MatchedSample,
    split: &SplitHandle,
    stat: &StatChoice,
    direction: Option<Direction>,
) -> Result<Vec<OutcomeData>> {
    let r_eff = split.r_eff();
    (0..sample.n_outcomes())
        .map(|l| {
            let name = sample.outcome_names[l].clone();
            let spec = stat.for_kind(sample.outcome_kinds[l]);
            let plan = match differences(sample, l, Direction::Positive, &split.planning_ids) {
                Ok(d) => d,
                Err(Error::EmptyOutcome(_)) => {
                    return Ok(OutcomeData {
                        planning: Planning {
                            name,
                            spec,
                            direction: Direction::Positive,
                            y: Vec::new(),
                            i_total: 0.0,
                            excluded: Some("no planning data".into()),
                        },
                        analysis: Vec::new(),
                    })
                }
                Err(e) => return Err(e),
            };
            let dir = direction.unwrap_or_else(|| direction_of(&plan.y));
            let s = dir.sign();
            let y: Vec<f64> = plan.y.iter().map(|v| s * v).collect();
            let analysis = match differences(sample, l, dir, &split.analysis_ids) {
                Ok(d) => d.y,
                Err(Error::EmptyOutcome(_)) => Vec::new(),
                Err(e) => return Err(e),
            };
            let i_total = y.len() as f64 / r_eff;
            Ok(OutcomeData {
                planning: Planning { name, spec, direction: dir, y, i_total, excluded: None },
                analysis,
            })
        })
        .collect()
}

/// Planning quantities shared across selection rounds and `Γ_con` values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanStats {
    pub n_plan: usize,
    pub i_total: f64,
    pub t: f64,
    pub var_ratio: f64,
    pub sigma_q: f64,
    pub kappa: SensValue,
    pub sigma_f: Option<f64>,
    pub boot_mean: Option<f64>,
    pub note: Option<String>,
}

impl PlanStats {
    fn excluded(n_plan: usize, note: String) -> Self {
        PlanStats {
            n_plan,
            i_total: 0.0,
            t: f64::NAN,
            var_ratio: f64::NAN,
            sigma_q: f64::NAN,
            kappa: SensValue { kappa: f64::NAN, gamma: f64::NAN, saturated: Default::default() },
            sigma_f: None,
            boot_mean: None,
            note: Some(note),
        }
    }

    pub fn usable(&self) -> bool {
        self.t.is_finite()
    }

    /// Planning worst-case p-value at `gamma`.
    pub fn p_at(&self, gamma: f64) -> f64 {
        let k = kappa_of(gamma);
        normal_sf((self.t - k) / (k * (1.0 - k) * self.var_ratio).sqrt())
    }
}

/// Computes planning statistics, bootstrapping when the method needs `σ̂_F`.
pub fn plan_stats(planning: &[Planning], plan: &ScreeningPlan) -> Vec<PlanStats> {
    let needs_boot = matches!(plan.method, Method::Sensval | Method::Approx);
    planning
        .par_iter()
        .enumerate()
        .map(|(l, p)| {
            if let Some(why) = &p.excluded {
                return PlanStats::excluded(0, why.clone());
            }
            let s = match score(&p.y, &p.spec) {
                Ok(s) => s,
                Err(e) => return PlanStats::excluded(p.y.len(), e.to_string()),
            };
            let kappa = sensitivity_value(&s, plan.alpha_plan).expect("validated alpha_plan");
            let mut st = PlanStats {
                n_plan: p.y.len(),
                i_total: p.i_total,
                t: s.t,
                var_ratio: s.var_ratio(),
                sigma_q: s.sigma_qi_sq.sqrt(),
                kappa,
                sigma_f: None,
                boot_mean: None,
                note: kappa.saturated.is_saturated().then(|| format!("kappa saturated {:?}", kappa.saturated)),
            };
            if needs_boot {
                match bootstrap_sigma(&p.y, &p.spec, plan.alpha_plan, plan.bootstrap, derive_seed(plan.seed, l as u64)) {
                    Ok(b) => {
                        st.boot_mean = Some(b.mean());
                        st.sigma_f = Some(b.sigma_f_hat);
                    }
                    Err(e) => st.note = Some(format!("bootstrap failed, naive fallback: {e}")),
                }
            }
            st
        })
        .collect()
}

/// `f(μ) = μ − [(2μ−1)η + √(4ημ(1−μ)+η²)] / (2(1+η))`.
pub fn approx_f(mu: f64, eta: f64) -> f64 {
    let root = (4.0 * eta * mu * (1.0 - mu) + eta * eta).max(0.0).sqrt();
    mu - ((2.0 * mu - 1.0) * eta + root) / (2.0 * (1.0 + eta))
}

/// `g(μ) = (1 + η(2μ−1)/√(4ημ(1−μ)+η²)) / (1+η)`; equals `f'(μ)`.
pub fn approx_g(mu: f64, eta: f64) -> f64 {
    if eta == 0.0 {
        return 1.0;
    }
    let root = (4.0 * eta * mu * (1.0 - mu) + eta * eta).max(0.0).sqrt();
    (1.0 + eta * (2.0 * mu - 1.0) / root) / (1.0 + eta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Decision {
    pub selected: bool,
    /// Positive (or zero for the naive rule) when selected.
    pub margin: f64,
    pub fallback_naive: bool,
}

pub(crate) const NOT_SELECTED: Decision = Decision { selected: false, margin: f64::NAN, fallback_naive: false };

pub(crate) fn naive_decision(st: &PlanStats, plan: &ScreeningPlan) -> Decision {
    let margin = plan.alpha - st.p_at(plan.gamma_con);
    Decision { selected: margin >= 0.0, margin, fallback_naive: false }
}

/// Left minus right side of the Sens-Val inequality.
pub fn sensval_margin(st: &PlanStats, sigma_f: f64, plan: &ScreeningPlan, alpha_l: f64) -> f64 {
    let (k, i, r) = (st.kappa.kappa, st.i_total, plan.r);
    let lhs = k
        + (k * (1.0 - k)).sqrt() * st.sigma_q / i.sqrt()
            * (z_upper(plan.alpha_plan) / r.sqrt() - z_upper(alpha_l) / (1.0 - r).sqrt());
    let rhs = plan.kappa_con() - sigma_f * z_upper(plan.alpha_coverage) / (i * r * (1.0 - r)).sqrt();
    lhs - rhs
}

/// Right side minus `κ_con` for the approximate rule.
pub fn approx_margin(st: &PlanStats, sigma_f: f64, plan: &ScreeningPlan, alpha_l: f64) -> f64 {
    let (k, i, r) = (st.kappa.kappa, st.i_total, plan.r);
    let sq2 = st.sigma_q * st.sigma_q;
    let i_plan = st.n_plan as f64;
    let i_analysis = (i - i_plan).max(1.0);
    let eta_plan = sq2 * z_upper(plan.alpha_plan).powi(2) / i_plan;
    let eta_l = sq2 * z_upper(alpha_l).powi(2) / i_analysis;
    let mu = (k + (eta_plan * k * (1.0 - k)).sqrt()).clamp(0.0, 1.0);
    let f = approx_f(mu, eta_l);
    let g = approx_g(mu, eta_l);
    let z = z_upper(plan.alpha_coverage);
    let spread = match plan.approx_rule {
        ApproxRule::Consistent => sigma_f * g.abs() * (1.0 / (1.0 - r) + 1.0 / r).sqrt() * z / i.sqrt(),
        ApproxRule::Literal => sigma_f * sigma_f * ((1.0 - r) * g * g + r * g * g) * z / i.sqrt(),
    };
    f + spread - plan.kappa_con()
}

/// Selection decision for one outcome at analysis level `alpha_l`.
pub fn decide(st: &PlanStats, plan: &ScreeningPlan, alpha_l: f64) -> Decision {
    if !st.usable() {
        return NOT_SELECTED;
    }
    let rule: fn(&PlanStats, f64, &ScreeningPlan, f64) -> f64 = match plan.method {
        Method::Naive => return naive_decision(st, plan),
        Method::Sensval => sensval_margin,
        Method::Approx => approx_margin,
        Method::SensvalFull => panic!("full-matching selection lives in the fullmatch module"),
    };
    match st.sigma_f {
        Some(sf) => {
            let margin = rule(st, sf, plan, alpha_l);
            Decision { selected: margin > 0.0, margin, fallback_naive: false }
        }
        None => Decision { fallback_naive: true, ..naive_decision(st, plan) },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    pub selected: Vec<usize>,
    pub decisions: Vec<Decision>,
    /// Levels used in the final selection round.
    pub selection_alpha: Vec<f64>,
    /// Levels at analysis time; zero for outcomes not selected.
    pub analysis_alpha: Vec<f64>,
    pub rounds: usize,
    pub converged: bool,
}

fn run_round(l: usize, alphas: &[f64], decide: &impl Fn(usize, f64) -> Decision) -> (Vec<usize>, Vec<Decision>) {
    let decisions: Vec<Decision> = (0..l).map(|i| decide(i, alphas[i])).collect();
    let selected = decisions.iter().enumerate().filter(|(_, d)| d.selected).map(|(i, _)| i).collect();
    (selected, decisions)
}

fn fixed_levels(v: &[f64], l: usize) -> Result<Vec<f64>> {
    match v.len() {
        1 => Ok(vec![v[0]; l]),
        n if n == l => Ok(v.to_vec()),
        n => Err(Error::config(format!("{n} fixed levels for {l} outcomes"))),
    }
}

fn finish(
    plan: &ScreeningPlan,
    l: usize,
    (selected, decisions): (Vec<usize>, Vec<Decision>),
    selection_alpha: Vec<f64>,
    rounds: usize,
    converged: bool,
) -> Result<Selection> {
    let mut analysis_alpha = vec![0.0; l];
    match &plan.alpha_l {
        AlphaPolicy::Fixed(v) => {
            let levels = fixed_levels(v, l)?;
            for &i in &selected {
                analysis_alpha[i] = levels[i];
            }
        }
        _ => {
            for &i in &selected {
                analysis_alpha[i] = plan.alpha / selected.len() as f64;
            }
        }
    }
    Ok(Selection { selected, decisions, selection_alpha, analysis_alpha, rounds, converged })
}

/// Applies the plan's level policy to a per-outcome decision rule
/// `decide(outcome, α_l)`.
pub fn select_by(l: usize, plan: &ScreeningPlan, decide: impl Fn(usize, f64) -> Decision) -> Result<Selection> {
    plan.validate()?;
    if l == 0 {
        return finish(plan, 0, (Vec::new(), Vec::new()), Vec::new(), 1, true);
    }
    match &plan.alpha_l {
        AlphaPolicy::Dynamic if plan.method != Method::Naive => dynamic_alpha_by(l, plan, decide),
        AlphaPolicy::Fixed(v) => {
            let alphas = fixed_levels(v, l)?;
            let round = run_round(l, &alphas, &decide);
            finish(plan, l, round, alphas, 1, true)
        }
        _ => {
            let alphas = vec![plan.alpha / l as f64; l];
            let round = run_round(l, &alphas, &decide);
            finish(plan, l, round, alphas, 1, true)
        }
    }
}

/// Selection from precomputed planning statistics under the plan's policy.
pub fn select_with_stats(stats: &[PlanStats], plan: &ScreeningPlan) -> Result<Selection> {
    select_by(stats.len(), plan, |i, a| decide(&stats[i], plan, a))
}

/// Iterates `α_l = α/|S|` starting from `α/L`, reusing one bootstrap per
/// outcome. Stops when the levels repeat, when `S` is empty, or after
/// [`DYNAMIC_MAX_ROUNDS`] rounds (then `converged` is false).
pub fn dynamic_alpha(stats: &[PlanStats], plan: &ScreeningPlan) -> Result<Selection> {
    plan.validate()?;
    dynamic_alpha_by(stats.len(), plan, |i, a| decide(&stats[i], plan, a))
}

fn dynamic_alpha_by(l: usize, plan: &ScreeningPlan, decide: impl Fn(usize, f64) -> Decision) -> Result<Selection> {
    let mut level = plan.alpha / l as f64;
    for round in 1..=DYNAMIC_MAX_ROUNDS {
        let alphas = vec![level; l];
        let (s, d) = run_round(l, &alphas, &decide);
        if s.is_empty() {
            return finish(plan, l, (s, d), alphas, round, true);
        }
        let next = plan.alpha / s.len() as f64;
        if next == level || round == DYNAMIC_MAX_ROUNDS {
            return finish(plan, l, (s, d), alphas, round, next == level);
        }
        level = next;
    }
    unreachable!()
}

/// Planning statistics followed by selection.
pub fn select(planning: &[Planning], plan: &ScreeningPlan) -> Result<(Vec<PlanStats>, Selection)> {
    plan.validate()?;
    let stats = plan_stats(planning, plan);
    let sel = select_with_stats(&stats, plan)?;
    Ok((stats, sel))
}

pub fn naive_select(planning: &[Planning], plan: &ScreeningPlan) -> Result<Selection> {
    let plan = ScreeningPlan { method: Method::Naive, ..plan.clone() };
    select(planning, &plan).map(|x| x.1)
}

pub fn sensval_select(planning: &[Planning], plan: &ScreeningPlan) -> Result<Selection> {
    let plan = ScreeningPlan { method: Method::Sensval, ..plan.clone() };
    select(planning, &plan).map(|x| x.1)
}

pub fn approx_select(planning: &[Planning], plan: &ScreeningPlan) -> Result<Selection> {
    let plan = ScreeningPlan { method: Method::Approx, ..plan.clone() };
    select(planning, &plan).map(|x| x.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Guard {
    pub max_r: f64,
    pub max_l: f64,
    pub ok: bool,
}

/// Largest planning fraction and outcome count for which Sens-Val is
/// guaranteed to select every outcome the naive rule selects, with
/// `α_l = α/L`.
pub fn guard_hyperparameters(alpha_plan: f64, alpha: f64, r: f64, l: usize) -> Guard {
    let zp = z_upper(alpha_plan);
    let zl = z_upper(alpha / l as f64);
    let max_r = zp * zp / (zp * zp + zl * zl);
    let max_l = alpha / normal_sf(((1.0 - r) / r).sqrt() * zp);
    Guard { max_r, max_l, ok: r <= max_r && l as f64 <= max_l && alpha_plan == alpha }
}

/// Limiting probability that a local-alternative outcome is selected.
#[allow(clippy::too_many_arguments)]
pub fn local_power(
    h: f64,
    r: f64,
    gamma_con: f64,
    alpha_l: f64,
    alpha_coverage: f64,
    mu_prime_theta0: f64,
    sigma_theta0: f64,
    sigma_q: f64,
) -> f64 {
    let arg = -z_upper(alpha_coverage) / (1.0 - r).sqrt() - h * mu_prime_theta0 / sigma_theta0
        + z_upper(alpha_l) * gamma_con.sqrt() * sigma_q / ((1.0 + gamma_con) * sigma_theta0) * (r / (1.0 - r)).sqrt();
    1.0 - normal_cdf(arg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutcomeAudit {
    pub name: String,
    pub direction: Direction,
    pub n_plan: usize,
    pub n_analysis: usize,
    pub kappa_plan: f64,
    pub gamma_plan: f64,
    pub sigma_f_hat: Option<f64>,
    pub selection_margin: Option<f64>,
    pub selected: bool,
    pub alpha_l: Option<f64>,
    pub analysis_p_upper: Option<f64>,
    pub rejected: bool,
    pub fallback_naive: bool,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionReport {
    pub method: Method,
    pub gamma_con: f64,
    pub alpha: f64,
    pub selected: Vec<usize>,
    pub rejected: Vec<usize>,
    pub rounds: usize,
    pub converged: bool,
    pub outcomes: Vec<OutcomeAudit>,
}

impl SelectionReport {
    pub fn any_saturated(&self) -> bool {
        self.outcomes.iter().any(|o| o.note.as_deref().is_some_and(|n| n.contains("saturated")))
    }

    /// One row per outcome.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            name: &'a str,
            kappa_plan: f64,
            sigma_f_hat: Option<f64>,
            selected: bool,
            alpha_l: Option<f64>,
            analysis_p_upper: Option<f64>,
            rejected: bool,
            direction: String,
            gamma_plan: f64,
            selection_margin: Option<f64>,
            n_plan: usize,
            n_analysis: usize,
        }
        let mut wtr = csv::Writer::from_writer(w);
        for o in &self.outcomes {
            wtr.serialize(Row {
                name: &o.name,
                kappa_plan: o.kappa_plan,
                sigma_f_hat: o.sigma_f_hat,
                selected: o.selected,
                alpha_l: o.alpha_l,
                analysis_p_upper: o.analysis_p_upper,
                rejected: o.rejected,
                direction: o.direction.to_string(),
                gamma_plan: o.gamma_plan,
                selection_margin: o.selection_margin,
                n_plan: o.n_plan,
                n_analysis: o.n_analysis,
            })
            .map_err(|e| Error::config(e.to_string()))?;
        }
        wtr.flush().map_err(|e| Error::config(e.to_string()))
    }
}

/// Tests the selected outcomes with `p_at_con(l)` (the analysis worst-case
/// p-value at `Γ_con`) and assembles the report.
pub fn analyze_with(
    selection: &Selection,
    stats: &[PlanStats],
    planning: &[Planning],
    n_analysis: &[usize],
    plan: &ScreeningPlan,
    p_at_con: impl Fn(usize) -> Result<f64>,
) -> Result<SelectionReport> {
    let budget: f64 = selection.selected.iter().map(|&i| selection.analysis_alpha[i]).sum();
    if budget > plan.alpha * (1.0 + 1e-12) {
        return Err(Error::config(format!("analysis levels sum to {budget}, above alpha = {}", plan.alpha)));
    }
    let mut outcomes = Vec::with_capacity(stats.len());
    let mut rejected = Vec::new();
    for (l, st) in stats.iter().enumerate() {
        let d = selection.decisions.get(l).copied().unwrap_or(NOT_SELECTED);
        let (alpha_l, p, rej) = if d.selected {
            let a = selection.analysis_alpha[l];
            let p = p_at_con(l).ok();
            let rej = p.is_some_and(|p| p <= a);
            (Some(a), p, rej)
        } else {
            (None, None, false)
        };
        if rej {
            rejected.push(l);
        }
        outcomes.push(OutcomeAudit {
            name: planning[l].name.clone(),
            direction: planning[l].direction,
            n_plan: st.n_plan,
            n_analysis: n_analysis[l],
            kappa_plan: st.kappa.kappa,
            gamma_plan: st.kappa.gamma,
            sigma_f_hat: st.sigma_f,
            selection_margin: d.margin.is_finite().then_some(d.margin),
            selected: d.selected,
            alpha_l,
            analysis_p_upper: p,
            rejected: rej,
            fallback_naive: d.fallback_naive,
            note: st.note.clone(),
        });
    }
    Ok(SelectionReport {
        method: plan.method,
        gamma_con: plan.gamma_con,
        alpha: plan.alpha,
        selected: selection.selected.clone(),
        rejected,
        rounds: selection.rounds,
        converged: selection.converged,
        outcomes,
    })
}

/// Analysis-sample worst-case p-value at `Γ_con` for pair differences.
pub fn analysis_p(y: &[f64], spec: &ScoreSpec, gamma_con: f64) -> Result<f64> {
    let s = score(y, spec)?;
    Ok(p_upper_at_kappa(&s, kappa_of(gamma_con)))
}

/// Tests the selected pair outcomes on the analysis sample.
pub fn analyze(
    outcomes: &[OutcomeData],
    stats: &[PlanStats],
    selection: &Selection,
    plan: &ScreeningPlan,
) -> Result<SelectionReport> {
    let planning: Vec<Planning> = outcomes.iter().map(|o| o.planning.clone()).collect();
    let n_analysis: Vec<usize> = outcomes.iter().map(|o| o.analysis.len()).collect();
    analyze_with(selection, stats, &planning, &n_analysis, plan, |l| {
        analysis_p(&outcomes[l].analysis, &outcomes[l].planning.spec, plan.gamma_con)
    })
}

/// Split-sample screening end to end on prepared pair outcomes.
pub fn screen(outcomes: &[OutcomeData], plan: &ScreeningPlan) -> Result<SelectionReport> {
    let planning: Vec<Planning> = outcomes.iter().map(|o| o.planning.clone()).collect();
    let (stats, sel) = select(&planning, plan)?;
    analyze(outcomes, &stats, &sel, plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScreeRow {
    pub gamma_con: f64,
    pub n_selected: usize,
}

/// Selection size along a `Γ_con` grid; planning statistics are shared.
pub fn scree(planning: &[Planning], plan: &ScreeningPlan, grid: &[f64]) -> Result<Vec<ScreeRow>> {
    if grid.is_empty() {
        return Err(Error::config("empty gamma grid"));
    }
    plan.validate()?;
    let stats = plan_stats(planning, plan);
    scree_with_stats(&stats, plan, grid)
}

pub fn scree_with_stats(stats: &[PlanStats], plan: &ScreeningPlan, grid: &[f64]) -> Result<Vec<ScreeRow>> {
    grid.iter()
        .map(|&g| {
            let p = ScreeningPlan { gamma_con: g, ..plan.clone() };
            Ok(ScreeRow { gamma_con: g, n_selected: select_with_stats(stats, &p)?.selected.len() })
        })
        .collect()
}

/// Checkmark table: which outcomes are rejected at each `Γ_con`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckmarkTable {
    pub method: Method,
    pub gammas: Vec<f64>,
    pub n_tested: Vec<usize>,
    pub n_rejected: Vec<usize>,
    pub rows: Vec<CheckmarkRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckmarkRow {
    pub outcome: String,
    pub direction: Direction,
    pub rejected: Vec<bool>,
}

/// Screens and tests at every `Γ_con` in `grid`, reusing planning statistics.
pub fn table_report(outcomes: &[OutcomeData], plan: &ScreeningPlan, grid: &[f64]) -> Result<(CheckmarkTable, Vec<SelectionReport>)> {
    if grid.is_empty() {
        return Err(Error::config("empty gamma grid"));
    }
    plan.validate()?;
    let planning: Vec<Planning> = outcomes.iter().map(|o| o.planning.clone()).collect();
    let stats = plan_stats(&planning, plan);
    let mut reports = Vec::with_capacity(grid.len());
    for &g in grid {
        let p = ScreeningPlan { gamma_con: g, ..plan.clone() };
        let sel = select_with_stats(&stats, &p)?;
        reports.push(analyze(outcomes, &stats, &sel, &p)?);
    }
    let rows = outcomes
        .iter()
        .enumerate()
        .map(|(l, o)| CheckmarkRow {
            outcome: o.planning.name.clone(),
            direction: o.planning.direction,
            rejected: reports.iter().map(|r| r.outcomes[l].rejected).collect(),
        })
        .collect();
    let table = CheckmarkTable {
        method: plan.method,
        gammas: grid.to_vec(),
        n_tested: reports.iter().map(|r| r.selected.len()).collect(),
        n_rejected: reports.iter().map(|r| r.rejected.len()).collect(),
        rows,
    };
    Ok((table, reports))
}

/// Full-sample Bonferroni test of every outcome at `α/L`.
///
/// One-sided tests reject when the worst-case upper p-value is at most
/// `α/L`; two-sided tests double the smaller of the two one-sided bounds.
pub fn bonferroni(full: &[Vec<f64>], specs: &[ScoreSpec], gamma: f64, alpha: f64, two_sided: bool) -> Result<Vec<bool>> {
    let level = alpha / full.len() as f64;
    let k = kappa_of(gamma);
    full.iter()
        .zip(specs)
        .map(|(y, spec)| {
            if y.is_empty() {
                return Ok(false);
            }
            let s = match score(y, spec) {
                Ok(s) => s,
                Err(Error::EmptyOutcome(_)) => return Ok(false),
                Err(e) => return Err(e),
            };
            let up = p_upper_at_kappa(&s, k);
            if two_sided {
                let neg: Vec<f64> = y.iter().map(|v| -v).collect();
                let down = p_upper_at_kappa(&score(&neg, spec)?, k);
                Ok(2.0 * up.min(down) <= level)
            } else {
                Ok(up <= level)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn stats_with(kappa: f64, sigma_f: f64, i_total: f64, n_plan: usize) -> PlanStats {
        PlanStats {
            n_plan,
            i_total,
            t: kappa,
            var_ratio: 4.0 / 3.0 / n_plan as f64,
            sigma_q: (4.0f64 / 3.0).sqrt(),
            kappa: SensValue { kappa, gamma: kappa / (1.0 - kappa), saturated: Default::default() },
            sigma_f: Some(sigma_f),
            boot_mean: None,
            note: None,
        }
    }

    #[test]
    fn guard_limit_values() {
        let g = guard_hyperparameters(0.05, 0.05, 0.25, 10);
        assert!((g.max_l - 22.8).abs() < 0.1, "{}", g.max_l);
        let g = guard_hyperparameters(0.05, 0.05, 0.2, 10);
        assert!((g.max_l - 99.7).abs() < 0.5, "{}", g.max_l);
        let g = guard_hyperparameters(0.05, 0.05, 0.2, 1);
        assert_relative_eq!(g.max_r, 0.5);
    }

    #[test]
    fn approx_functions() {
        for mu in [0.1, 0.5, 0.8] {
            assert_eq!(approx_f(mu, 0.0), mu);
            assert_eq!(approx_g(mu, 0.0), 1.0);
        }
        for eta in [0.01, 0.3, 2.0] {
            assert_relative_eq!(
                approx_f(0.5, eta),
                0.5 - (eta + eta * eta).sqrt() / (2.0 * (1.0 + eta)),
                max_relative = 1e-12
            );
            for mu in [0.2, 0.55, 0.9] {
                let h = 1e-6;
                let fd = (approx_f(mu + h, eta) - approx_f(mu - h, eta)) / (2.0 * h);
                assert_relative_eq!(fd, approx_g(mu, eta), max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn zero_sigma_far_above_is_selected() {
        let mut plan = ScreeningPlan::new(Method::Sensval, 1.5, 0.05);
        plan.alpha_l = AlphaPolicy::Fixed(vec![0.05]);
        let st = stats_with(0.95, 0.0, 500.0, 100);
        assert!(decide(&st, &plan, 0.05).selected);
    }

    #[test]
    fn missing_sigma_falls_back_to_naive() {
        let plan = ScreeningPlan::new(Method::Sensval, 1.0, 0.05);
        let mut st = stats_with(0.9, 0.1, 500.0, 100);
        st.sigma_f = None;
        let d = decide(&st, &plan, 0.05);
        assert!(d.fallback_naive && d.selected);
    }

    #[test]
    fn dynamic_single_outcome() {
        let plan = ScreeningPlan::new(Method::Sensval, 1.5, 0.05);
        let stats = vec![stats_with(0.9, 0.2, 500.0, 100)];
        let sel = dynamic_alpha(&stats, &plan).unwrap();
        assert_eq!(sel.rounds, 1);
        assert!(sel.converged);
        assert_eq!(sel.selection_alpha, vec![0.05]);
        assert_eq!(sel.analysis_alpha, vec![0.05]);
    }

    #[test]
    fn dynamic_all_null_is_empty() {
        let plan = ScreeningPlan::new(Method::Sensval, 3.0, 0.05);
        let stats: Vec<PlanStats> = (0..8).map(|_| stats_with(0.45, 0.3, 500.0, 100)).collect();
        let sel = dynamic_alpha(&stats, &plan).unwrap();
        assert!(sel.selected.is_empty());
        assert!(sel.converged);
    }

    #[test]
    fn analysis_budget_enforced() {
        let plan = ScreeningPlan { alpha_l: AlphaPolicy::Fixed(vec![0.04, 0.04]), ..ScreeningPlan::new(Method::Naive, 1.0, 0.05) };
        let stats = vec![stats_with(0.9, 0.1, 50.0, 10), stats_with(0.9, 0.1, 50.0, 10)];
        let sel = select_with_stats(&stats, &plan).unwrap();
        assert_eq!(sel.selected.len(), 2);
        let planning: Vec<Planning> = (0..2)
            .map(|i| Planning {
                name: format!("o{i}"),
                spec: ScoreSpec::Wilcoxon,
                direction: Direction::Positive,
                y: vec![],
                i_total: 50.0,
                excluded: None,
            })
            .collect();
        let err = analyze_with(&sel, &stats, &planning, &[40, 40], &plan, |_| Ok(0.0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("dynamic".parse::<AlphaPolicy>().unwrap(), AlphaPolicy::Dynamic);
        assert_eq!("fixed:0.01,0.04".parse::<AlphaPolicy>().unwrap(), AlphaPolicy::Fixed(vec![0.01, 0.04]));
        assert!("fixed:x".parse::<AlphaPolicy>().is_err());
        assert_eq!("sensval".parse::<Method>().unwrap(), Method::Sensval);
    }

    #[test]
    fn local_power_limits() {
        let mp = 0.5143;
        let s = 0.5357;
        let sq = (4.0f64 / 3.0).sqrt();
        assert!(local_power(1e6, 0.2, 2.0, 0.05, 0.05, mp, s, sq) > 1.0 - 1e-12);
        let a = local_power(0.1, 0.2, 2.0, 0.05, 0.05, mp, s, sq);
        let b = local_power(0.3, 0.2, 2.0, 0.05, 0.05, mp, s, sq);
        assert!(b > a);
    }
}
