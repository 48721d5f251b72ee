//! Monte Carlo power and FWER experiments.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matched_data::{split, Direction, MatchedSample, MatchedSet, OutcomeKind, Unit};
use crate::score_stats::ScoreSpec;
use crate::screening::{
    analysis_p, analyze, bonferroni, plan_stats, prepare_pairs, select_with_stats, AlphaPolicy, ApproxRule, Method,
    OutcomeData, Planning, ScreeningPlan, StatChoice,
};
use crate::sensitivity::replicate_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Noise {
    Normal,
    Logistic,
    StudentT(f64),
}

impl Noise {
    fn draw(self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Noise::Normal => rng.sample(StandardNormal),
            Noise::Logistic => {
                let u: f64 = rng.gen_range(f64::EPSILON..1.0);
                (u / (1.0 - u)).ln()
            }
            Noise::StudentT(df) => StudentT::new(df).unwrap().sample(rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaData {
    Fixed(f64),
    /// Confounding on null outcomes at the control level (`Γ_data = Γ_con`).
    MatchCon,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatedProp {
    Beta(f64, f64),
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    Randomized { prob: f64 },
    Confounded { gamma_data: GammaData, treated: TreatedProp },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matching {
    /// Random treated/control pairs.
    Direct,
    /// Greedy nearest neighbour on the logit propensity, caliper in SDs.
    Caliper(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMethod {
    Bonferroni,
    Naive,
    Sensval,
    Approx,
    Oracle,
}

impl fmt::Display for SimMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimMethod::Bonferroni => "bonferroni",
            SimMethod::Naive => "naive",
            SimMethod::Sensval => "sensval",
            SimMethod::Approx => "approx",
            SimMethod::Oracle => "oracle",
        })
    }
}

/// One experiment. Outcomes `0..n_signals` carry the effect `tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub name: String,
    pub n_subjects: usize,
    pub n_outcomes: usize,
    pub n_signals: usize,
    pub tau: f64,
    pub d: usize,
    pub assignment: Assignment,
    pub matching: Matching,
    pub noise: Noise,
    pub r: f64,
    pub methods: Vec<SimMethod>,
    pub gamma_con: f64,
    pub alpha: f64,
    pub alpha_plan: f64,
    pub alpha_coverage: f64,
    pub alpha_l: AlphaPolicy,
    pub bootstrap: usize,
    pub spec: ScoreSpec,
    pub approx_rule: ApproxRule,
    /// Two-sided full-sample Bonferroni baseline.
    pub bonferroni_two_sided: bool,
    pub reps: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            name: "custom".into(),
            n_subjects: 200,
            n_outcomes: 20,
            n_signals: 5,
            tau: 0.75,
            d: 0,
            assignment: Assignment::Randomized { prob: 0.5 },
            matching: Matching::Direct,
            noise: Noise::Normal,
            r: 0.2,
            methods: vec![SimMethod::Bonferroni, SimMethod::Naive, SimMethod::Sensval, SimMethod::Oracle],
            gamma_con: 1.5,
            alpha: 0.05,
            alpha_plan: 0.05,
            alpha_coverage: 0.05,
            alpha_l: AlphaPolicy::Dynamic,
            bootstrap: 250,
            spec: ScoreSpec::Wilcoxon,
            approx_rule: ApproxRule::Consistent,
            bonferroni_two_sided: false,
            reps: 1000,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_signals > self.n_outcomes || self.n_outcomes == 0 {
            return Err(Error::config("need 0 < L and signals <= L"));
        }
        if let Assignment::Confounded { gamma_data: GammaData::Fixed(g), .. } = self.assignment {
            if g > self.gamma_con {
                return Err(Error::config(format!("gamma_data {g} exceeds gamma_con {}", self.gamma_con)));
            }
        }
        if matches!(self.assignment, Assignment::Randomized { .. }) && self.matching != Matching::Direct {
            return Err(Error::config("randomized assignment pairs directly"));
        }
        if matches!(self.assignment, Assignment::Confounded { .. }) && self.matching == Matching::Direct {
            return Err(Error::config("confounded assignment needs caliper matching"));
        }
        if self.reps == 0 {
            return Err(Error::config("reps must be positive"));
        }
        self.screening_plan(Method::Sensval, 0, self.r).validate()
    }

    pub fn gamma_data(&self) -> f64 {
        match self.assignment {
            Assignment::Confounded { gamma_data: GammaData::Fixed(g), .. } => g,
            Assignment::Confounded { gamma_data: GammaData::MatchCon, .. } => self.gamma_con,
            Assignment::Randomized { .. } => 1.0,
        }
    }

    fn screening_plan(&self, method: Method, seed: u64, r: f64) -> ScreeningPlan {
        ScreeningPlan {
            gamma_con: self.gamma_con,
            alpha: self.alpha,
            alpha_plan: self.alpha_plan,
            alpha_coverage: self.alpha_coverage,
            alpha_l: self.alpha_l.clone(),
            r,
            bootstrap: self.bootstrap,
            method,
            seed,
            approx_rule: self.approx_rule,
        }
    }

    fn is_signal(&self, l: usize) -> bool {
        l < self.n_signals && self.tau != 0.0
    }
}

/// Named experiments.
pub fn preset(name: &str) -> Result<SimConfig> {
    use SimMethod::*;
    let base = SimConfig { name: name.to_string(), ..SimConfig::default() };
    let confounded = |gamma_data, treated| Assignment::Confounded { gamma_data, treated };
    let cfg = match name {
        "randomized-wide" | "sec3.1" => SimConfig {
            n_subjects: 1000,
            n_outcomes: 500,
            n_signals: 10,
            tau: 1.0,
            gamma_con: 3.5,
            methods: vec![Bonferroni, Naive, Oracle],
            ..base
        },
        "randomized" | "sec3.2" => SimConfig { alpha_l: AlphaPolicy::Bonferroni, ..base },
        "randomized-dynamic" => SimConfig { methods: vec![Bonferroni, Naive, Sensval, Approx, Oracle], ..base },
        "null" => SimConfig {
            tau: 0.0,
            gamma_con: 1.0,
            methods: vec![Bonferroni, Naive, Sensval, Approx, Oracle],
            reps: 2000,
            ..base
        },
        "sparse" => SimConfig { n_outcomes: 100, n_signals: 5, methods: vec![Naive, Sensval, Oracle], ..base },
        "large-sample" | "large-sample-uc" => SimConfig {
            n_subjects: 5000,
            n_outcomes: 250,
            n_signals: 5,
            d: 20,
            tau: 1.5,
            gamma_con: 2.0,
            assignment: confounded(
                if name == "large-sample" { GammaData::Fixed(1.0) } else { GammaData::MatchCon },
                TreatedProp::Beta(10.0, 10.0),
            ),
            matching: Matching::Caliper(0.2),
            ..base
        },
        "data-inspired" | "data-inspired-nuc" => SimConfig {
            n_subjects: 757,
            n_outcomes: 93,
            n_signals: 5,
            d: 33,
            tau: 3.0,
            gamma_con: 2.5,
            assignment: confounded(
                if name == "data-inspired" { GammaData::MatchCon } else { GammaData::Fixed(1.0) },
                TreatedProp::Fixed(0.71),
            ),
            matching: Matching::Caliper(0.2),
            ..base
        },
        _ => return Err(Error::config(format!("unknown preset `{name}`"))),
    };
    Ok(cfg)
}

pub const PRESETS: &[&str] = &[
    "randomized-wide",
    "randomized",
    "randomized-dynamic",
    "null",
    "sparse",
    "large-sample",
    "large-sample-uc",
    "data-inspired",
    "data-inspired-nuc",
];

/// Randomized experiment paired directly: each subject is treated with
/// probability `prob`, then `min(n_T, n_C)` random treated/control pairs
/// are formed and surplus units dropped.
pub fn gen_randomized(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Result<MatchedSample> {
    let Assignment::Randomized { prob } = cfg.assignment else {
        return Err(Error::config("gen_randomized needs randomized assignment"));
    };
    let (mut treated, mut control) = (Vec::new(), Vec::new());
    for i in 0..cfg.n_subjects {
        if rng.gen_bool(prob) {
            treated.push(i)
        } else {
            control.push(i)
        }
    }
    let n = treated.len().min(control.len());
    let l = cfg.n_outcomes;
    let mut sets = Vec::with_capacity(n);
    for k in 0..n {
        let mut tv = Vec::with_capacity(l);
        let mut cv = Vec::with_capacity(l);
        for j in 0..l {
            let rt = cfg.noise.draw(rng) + if cfg.is_signal(j) { cfg.tau } else { 0.0 };
            tv.push(Some(rt));
            cv.push(Some(cfg.noise.draw(rng)));
        }
        sets.push(MatchedSet {
            id: k.to_string(),
            units: vec![Unit { z: true, values: tv }, Unit { z: false, values: cv }],
        });
    }
    // pairing is random by construction: subjects are exchangeable
    MatchedSample::new(sets, outcome_names(l), vec![OutcomeKind::Continuous; l])
}

fn outcome_names(l: usize) -> Vec<String> {
    (0..l).map(|i| format!("y{}", i + 1)).collect()
}

/// Unit-level draws from the confounded generator.
#[derive(Debug, Clone, PartialEq)]
pub struct Subjects {
    pub x: Vec<Vec<f64>>,
    pub u: Vec<f64>,
    pub z: Vec<bool>,
    /// Observed outcomes, one row per subject.
    pub outcomes: Vec<Vec<f64>>,
    pub alpha0: f64,
}

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn assignment_logits(x: &[Vec<f64>], u: &[f64], mu: &[f64], gamma_data: f64) -> Vec<f64> {
    let lg = gamma_data.ln();
    x.iter()
        .zip(u)
        .map(|(xi, &ui)| {
            let lin: f64 = xi.iter().zip(mu).map(|(a, b)| a * b).sum();
            lin - if ui > 0.0 { lg } else { 0.0 }
        })
        .collect()
}

/// Intercept making the mean assignment probability equal `target`
/// (to within 1e−4).
pub fn calibrate_alpha0(target: f64, x: &[Vec<f64>], u: &[f64], mu: &[f64], gamma_data: f64) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Calibration(format!("target proportion {target} outside (0,1)")));
    }
    let base = assignment_logits(x, u, mu, gamma_data);
    let mean = |a: f64| base.iter().map(|&b| expit(a + b)).sum::<f64>() / base.len() as f64;
    let (mut lo, mut hi) = (-1.0, 1.0);
    let mut expansions = 0;
    while mean(lo) > target || mean(hi) < target {
        lo *= 2.0;
        hi *= 2.0;
        expansions += 1;
        if expansions > 60 {
            return Err(Error::Calibration("bracket expansion cap exceeded".into()));
        }
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mean(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let a = 0.5 * (lo + hi);
    if (mean(a) - target).abs() > 1e-4 {
        return Err(Error::Calibration(format!("mean probability {} misses target {target}", mean(a))));
    }
    Ok(a)
}

/// Confounded observational draw.
pub fn gen_confounded(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Result<Subjects> {
    let Assignment::Confounded { treated, .. } = cfg.assignment else {
        return Err(Error::config("gen_confounded needs confounded assignment"));
    };
    let (n, d) = (cfg.n_subjects, cfg.d.max(1));
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen::<f64>()).collect()).collect();
    let u: Vec<f64> = x
        .iter()
        .map(|xi| {
            let sd = 1.0 + (3.0 * xi[0]).sin() / 2.0;
            sd * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    let mu: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let target = match treated {
        TreatedProp::Fixed(p) => p,
        TreatedProp::Beta(a, b) => Beta::new(a, b).map_err(|e| Error::config(e.to_string()))?.sample(rng),
    };
    let gamma_data = cfg.gamma_data();
    let alpha0 = calibrate_alpha0(target, &x, &u, &mu, gamma_data)?;
    let logits = assignment_logits(&x, &u, &mu, gamma_data);
    let z: Vec<bool> = logits.iter().map(|&b| rng.gen_bool(expit(alpha0 + b))).collect();
    let mut outcomes = vec![Vec::with_capacity(cfg.n_outcomes); n];
    for l in 0..cfg.n_outcomes {
        let beta: Vec<f64> = (0..d).map(|_| 1.0 + rng.sample::<f64, _>(StandardNormal)).collect();
        let signal = cfg.is_signal(l);
        for i in 0..n {
            let eps = 0.5 * rng.sample::<f64, _>(StandardNormal);
            let base: f64 = x[i].iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() + eps;
            let v = if l < cfg.n_signals {
                base + if z[i] && signal { cfg.tau } else { 0.0 }
            } else {
                base + u[i]
            };
            outcomes[i].push(v);
        }
    }
    Ok(Subjects { x, u, z, outcomes, alpha0 })
}

/// Logistic regression of `z` on `[1, x]` by iteratively reweighted least
/// squares; returns the coefficients.
pub fn fit_logistic(x: &[Vec<f64>], z: &[bool], max_iter: usize, tol: f64) -> Vec<f64> {
    let n = x.len();
    let p = x.first().map_or(0, |r| r.len()) + 1;
    let design = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] });
    let y = DVector::from_fn(n, |i, _| if z[i] { 1.0 } else { 0.0 });
    let mut beta = DVector::zeros(p);
    for _ in 0..max_iter {
        let eta = &design * &beta;
        let prob = eta.map(|e| expit(e).clamp(1e-10, 1.0 - 1e-10));
        let w = prob.map(|q| q * (1.0 - q));
        let work = DVector::from_fn(n, |i, _| eta[i] + (y[i] - prob[i]) / w[i]);
        let mut xtw = design.transpose();
        for (j, mut col) in xtw.column_iter_mut().enumerate() {
            col *= w[j];
        }
        let lhs = &xtw * &design;
        let rhs = &xtw * &work;
        let next = match lhs.clone().cholesky() {
            Some(c) => c.solve(&rhs),
            None => match lhs.lu().solve(&rhs) {
                Some(b) => b,
                None => break,
            },
        };
        let step = (&next - &beta).amax();
        beta = next;
        if step < tol || !beta.iter().all(|b| b.is_finite()) {
            break;
        }
    }
    beta.iter().copied().collect()
}

/// Propensity-score pair matching: logistic fit (≤ 50 IRLS iterations,
/// tolerance 1e−8), then greedy nearest-neighbour matching on the logit,
/// treated units in decreasing propensity order, with caliper
/// `caliper_sd_mult × SD(logit)`. Unmatched units are dropped.
pub fn propensity_match(subjects: &Subjects, caliper_sd_mult: f64) -> Result<MatchedSample> {
    let beta = fit_logistic(&subjects.x, &subjects.z, 50, 1e-8);
    let lp: Vec<f64> = subjects
        .x
        .iter()
        .map(|xi| beta[0] + xi.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let n = lp.len() as f64;
    let mean = lp.iter().sum::<f64>() / n;
    let sd = (lp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let caliper = caliper_sd_mult * sd;
    let pairs = greedy_caliper(&lp, &subjects.z, caliper);
    if pairs.is_empty() {
        return Err(Error::NoMatches { caliper });
    }
    let l = subjects.outcomes.first().map_or(0, |o| o.len());
    let sets = pairs
        .iter()
        .enumerate()
        .map(|(k, &(t, c))| MatchedSet {
            id: k.to_string(),
            units: vec![
                Unit { z: true, values: subjects.outcomes[t].iter().map(|&v| Some(v)).collect() },
                Unit { z: false, values: subjects.outcomes[c].iter().map(|&v| Some(v)).collect() },
            ],
        })
        .collect();
    MatchedSample::new(sets, outcome_names(l), vec![OutcomeKind::Continuous; l])
}

/// Greedy 1:1 matching on a scalar score within `caliper`.
pub fn greedy_caliper(score: &[f64], z: &[bool], caliper: f64) -> Vec<(usize, usize)> {
    let mut controls: Vec<(f64, usize)> = (0..score.len()).filter(|&i| !z[i]).map(|i| (score[i], i)).collect();
    controls.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut open: BTreeSet<usize> = (0..controls.len()).collect();
    let mut treated: Vec<usize> = (0..score.len()).filter(|&i| z[i]).collect();
    treated.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    let mut pairs = Vec::new();
    for t in treated {
        if open.is_empty() {
            break;
        }
        let s = score[t];
        let pos = controls.partition_point(|c| c.0 < s);
        let up = open.range(pos..).next().copied();
        let down = open.range(..pos).next_back().copied();
        let best = match (up, down) {
            (Some(a), Some(b)) => {
                if (controls[a].0 - s).abs() < (s - controls[b].0).abs() {
                    a
                } else {
                    b
                }
            }
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => break,
        };
        if (controls[best].0 - s).abs() <= caliper {
            open.remove(&best);
            pairs.push((t, controls[best].1));
        }
    }
    pairs
}

/// Standardized mean differences of each covariate across matched pairs.
pub fn standardized_differences(subjects: &Subjects, pairs: &[(usize, usize)]) -> Vec<f64> {
    let d = subjects.x[0].len();
    (0..d)
        .map(|j| {
            let t: Vec<f64> = pairs.iter().map(|p| subjects.x[p.0][j]).collect();
            let c: Vec<f64> = pairs.iter().map(|p| subjects.x[p.1][j]).collect();
            let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let var = |v: &[f64]| {
                let mu = m(v);
                v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
            };
            (m(&t) - m(&c)) / ((var(&t) + var(&c)) / 2.0).sqrt()
        })
        .collect()
}

/// Matched sample for one replicate.
pub fn generate(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Result<MatchedSample> {
    match (cfg.assignment, cfg.matching) {
        (Assignment::Randomized { .. }, _) => gen_randomized(cfg, rng),
        (Assignment::Confounded { .. }, Matching::Caliper(c)) => propensity_match(&gen_confounded(cfg, rng)?, c),
        (Assignment::Confounded { .. }, Matching::Direct) => Err(Error::config("confounded assignment needs caliper matching")),
    }
}

/// Per-method outcome of one replicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepResult {
    pub method: SimMethod,
    /// Fraction of signals rejected; `None` without signals.
    pub tpr: Option<f64>,
    pub false_rejection: bool,
    pub n_selected: Option<usize>,
    pub rounds: Option<usize>,
}

/// Runs one replicate with its own RNG stream.
pub fn run_replicate(cfg: &SimConfig, rep: u64) -> Result<Vec<RepResult>> {
    let mut rng = replicate_rng(cfg.seed, rep);
    let sample = generate(cfg, &mut rng)?;
    let sp = split(&sample, cfg.r, rng.gen())?;
    let outcomes = prepare_pairs(&sample, &sp, &StatChoice::All(cfg.spec.clone()), Some(Direction::Positive))?;
    let boot_seed: u64 = rng.gen();
    let r = sp.r_eff();
    let l = cfg.n_outcomes;
    let signals: Vec<usize> = (0..l).filter(|&j| cfg.is_signal(j)).collect();
    let tally = |method: SimMethod, rejected: &[usize], n_selected: Option<usize>, rounds: Option<usize>| {
        let hits = rejected.iter().filter(|&&j| cfg.is_signal(j)).count();
        RepResult {
            method,
            tpr: (!signals.is_empty()).then(|| hits as f64 / signals.len() as f64),
            false_rejection: rejected.iter().any(|&j| !cfg.is_signal(j)),
            n_selected,
            rounds,
        }
    };
    let mut out = Vec::with_capacity(cfg.methods.len());
    let mut boot_stats = None;
    for &m in &cfg.methods {
        let res = match m {
            SimMethod::Bonferroni => {
                let full: Vec<Vec<f64>> = outcomes.iter().map(|o| [o.planning.y.as_slice(), &o.analysis].concat()).collect();
                let specs: Vec<ScoreSpec> = outcomes.iter().map(|o| o.planning.spec.clone()).collect();
                let rej = bonferroni(&full, &specs, cfg.gamma_con, cfg.alpha, cfg.bonferroni_two_sided)?;
                let rejected: Vec<usize> = (0..l).filter(|&j| rej[j]).collect();
                tally(m, &rejected, None, None)
            }
            SimMethod::Oracle => {
                let level = cfg.alpha / signals.len().max(1) as f64;
                let mut rejected = Vec::new();
                for &j in &signals {
                    if analysis_p(&outcomes[j].analysis, &cfg.spec, cfg.gamma_con)? <= level {
                        rejected.push(j);
                    }
                }
                tally(m, &rejected, Some(signals.len()), None)
            }
            SimMethod::Naive | SimMethod::Sensval | SimMethod::Approx => {
                let method = match m {
                    SimMethod::Naive => Method::Naive,
                    SimMethod::Sensval => Method::Sensval,
                    _ => Method::Approx,
                };
                let plan = cfg.screening_plan(method, boot_seed, r);
                let stats = if method == Method::Naive {
                    plan_stats(&planning_views(&outcomes), &plan)
                } else {
                    boot_stats.get_or_insert_with(|| plan_stats(&planning_views(&outcomes), &plan)).clone()
                };
                let sel = select_with_stats(&stats, &plan)?;
                let report = analyze(&outcomes, &stats, &sel, &plan)?;
                tally(m, &report.rejected, Some(report.selected.len()), Some(report.rounds))
            }
        };
        out.push(res);
    }
    Ok(out)
}

fn planning_views(outcomes: &[OutcomeData]) -> Vec<Planning> {
    outcomes.iter().map(|o| o.planning.clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerEstimate {
    pub method: SimMethod,
    pub tpr: Option<f64>,
    pub tpr_se: Option<f64>,
    pub fwer: f64,
    pub fwer_se: f64,
    pub mean_selected: Option<f64>,
    /// Fraction of replicates whose dynamic loop converged within 5 rounds.
    pub rounds_le5: Option<f64>,
    pub reps: usize,
    pub excluded: usize,
    /// Standard errors are zero because only one replicate was used.
    pub se_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub config: SimConfig,
    pub estimates: Vec<PowerEstimate>,
    pub excluded: usize,
    pub errors: Vec<String>,
}

impl ExperimentResult {
    pub fn get(&self, m: SimMethod) -> Option<&PowerEstimate> {
        self.estimates.iter().find(|e| e.method == m)
    }
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Runs every replicate (in parallel) and reduces in replicate order.
pub fn run_experiment(cfg: &SimConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let results: Vec<Result<Vec<RepResult>>> =
        (0..cfg.reps as u64).into_par_iter().map(|rep| run_replicate(cfg, rep)).collect();
    let mut errors = Vec::new();
    let ok: Vec<Vec<RepResult>> = results
        .into_iter()
        .filter_map(|r| r.map_err(|e| errors.push(e.to_string())).ok())
        .collect();
    let excluded = errors.len();
    let estimates = cfg
        .methods
        .iter()
        .enumerate()
        .map(|(k, &method)| {
            let reps: Vec<&RepResult> = ok.iter().map(|r| &r[k]).collect();
            let tprs: Vec<f64> = reps.iter().filter_map(|r| r.tpr).collect();
            let fw: Vec<f64> = reps.iter().map(|r| if r.false_rejection { 1.0 } else { 0.0 }).collect();
            let sel: Vec<f64> = reps.iter().filter_map(|r| r.n_selected.map(|s| s as f64)).collect();
            let rounds: Vec<f64> = reps.iter().filter_map(|r| r.rounds.map(|x| if x <= 5 { 1.0 } else { 0.0 })).collect();
            let (tpr, tpr_se) = if tprs.is_empty() { (None, None) } else {
                let (m, s) = mean_se(&tprs);
                (Some(m), Some(s))
            };
            let (fwer, _) = if fw.is_empty() { (0.0, 0.0) } else { mean_se(&fw) };
            let fwer_se = if fw.len() < 2 { 0.0 } else { (fwer * (1.0 - fwer) / fw.len() as f64).sqrt() };
            PowerEstimate {
                method,
                tpr,
                tpr_se,
                fwer,
                fwer_se,
                mean_selected: (!sel.is_empty()).then(|| mean_se(&sel).0),
                rounds_le5: (!rounds.is_empty()).then(|| mean_se(&rounds).0),
                reps: reps.len(),
                excluded,
                se_flag: reps.len() < 2,
            }
        })
        .collect();
    Ok(ExperimentResult { config: cfg.clone(), estimates, excluded, errors })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKey {
    Tau,
    Gamma,
    GammaData,
    R,
    AlphaCoverage,
    L,
    Nonnull,
    N,
}

impl FromStr for SweepKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "tau" => SweepKey::Tau,
            "gamma" | "gamma_con" => SweepKey::Gamma,
            "gamma_data" => SweepKey::GammaData,
            "r" => SweepKey::R,
            "alpha_coverage" | "acov" => SweepKey::AlphaCoverage,
            "L" | "l" => SweepKey::L,
            "nonnull" => SweepKey::Nonnull,
            "N" | "n" => SweepKey::N,
            _ => return Err(Error::config(format!("unknown sweep key `{s}`"))),
        })
    }
}

/// A grid over one configuration field, e.g. `tau=0.5,1,2`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sweep {
    pub key: SweepKey,
    pub values: Vec<f64>,
}

impl FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (k, v) = s.split_once('=').ok_or_else(|| Error::config(format!("sweep `{s}` is not key=v1,v2")))?;
        let values = v
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::config(format!("bad sweep values `{v}`")))?;
        if values.is_empty() {
            return Err(Error::config("empty sweep"));
        }
        Ok(Sweep { key: k.trim().parse()?, values })
    }
}

impl Sweep {
    pub fn apply(key: SweepKey, value: f64, cfg: &mut SimConfig) -> Result<()> {
        match key {
            SweepKey::Tau => cfg.tau = value,
            SweepKey::Gamma => cfg.gamma_con = value,
            SweepKey::GammaData => match &mut cfg.assignment {
                Assignment::Confounded { gamma_data, .. } => *gamma_data = GammaData::Fixed(value),
                _ => return Err(Error::config("gamma_data sweep needs confounded assignment")),
            },
            SweepKey::R => cfg.r = value,
            SweepKey::AlphaCoverage => cfg.alpha_coverage = value,
            SweepKey::L => {
                cfg.n_outcomes = value as usize;
                cfg.n_signals = cfg.n_signals.min(cfg.n_outcomes);
            }
            SweepKey::Nonnull => cfg.n_signals = ((value * cfg.n_outcomes as f64).round() as usize).max(1),
            SweepKey::N => cfg.n_subjects = value as usize,
        }
        Ok(())
    }
}

/// Cartesian product of sweeps; one config per grid point.
pub fn expand(cfg: &SimConfig, sweeps: &[Sweep]) -> Result<Vec<SimConfig>> {
    let mut grid = vec![cfg.clone()];
    for s in sweeps {
        let mut next = Vec::with_capacity(grid.len() * s.values.len());
        for g in &grid {
            for &v in &s.values {
                let mut c = g.clone();
                Sweep::apply(s.key, v, &mut c)?;
                next.push(c);
            }
        }
        grid = next;
    }
    Ok(grid)
}

/// One CSV row per method and grid point.
pub fn write_csv(results: &[ExperimentResult], w: impl Write) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        preset: &'a str,
        tau: f64,
        gamma_con: f64,
        gamma_data: f64,
        r: f64,
        alpha_coverage: f64,
        n_subjects: usize,
        n_outcomes: usize,
        n_signals: usize,
        method: String,
        tpr: Option<f64>,
        se: Option<f64>,
        fwer: f64,
        fwer_se: f64,
        mean_selected: Option<f64>,
        reps: usize,
        excluded: usize,
        se_flag: bool,
    }
    let mut wtr = csv::Writer::from_writer(w);
    for res in results {
        let c = &res.config;
        for e in &res.estimates {
            wtr.serialize(Row {
                preset: &c.name,
                tau: c.tau,
                gamma_con: c.gamma_con,
                gamma_data: c.gamma_data(),
                r: c.r,
                alpha_coverage: c.alpha_coverage,
                n_subjects: c.n_subjects,
                n_outcomes: c.n_outcomes,
                n_signals: c.n_signals,
                method: e.method.to_string(),
                tpr: e.tpr,
                se: e.tpr_se,
                fwer: e.fwer,
                fwer_se: e.fwer_se,
                mean_selected: e.mean_selected,
                reps: e.reps,
                excluded: e.excluded,
                se_flag: e.se_flag,
            })
            .map_err(|e| Error::config(e.to_string()))?;
        }
    }
    wtr.flush().map_err(|e| Error::config(e.to_string()))
}

/// Pair sample with the dimensions of a household survey: `n_pairs`
/// pairs, `n_outcomes` outcomes of which the last `n_binary` are 0/1.
/// The first `n_signals` continuous outcomes carry effects decreasing
/// from `tau_max`; binary signals raise the treated rate by 0.25.
pub fn synthetic_study(
    n_pairs: usize,
    n_outcomes: usize,
    n_binary: usize,
    n_signals: usize,
    tau_max: f64,
    seed: u64,
) -> Result<MatchedSample> {
    if n_binary > n_outcomes || n_signals > n_outcomes {
        return Err(Error::config("binary and signal counts must not exceed the outcome count"));
    }
    let mut rng = replicate_rng(seed, 0);
    let n_cont = n_outcomes - n_binary;
    let effect = |l: usize| {
        if l < n_signals {
            tau_max * (1.0 - l as f64 / n_signals as f64 * 0.75)
        } else {
            0.0
        }
    };
    let mut sets = Vec::with_capacity(n_pairs);
    for k in 0..n_pairs {
        let mut tv = Vec::with_capacity(n_outcomes);
        let mut cv = Vec::with_capacity(n_outcomes);
        for l in 0..n_outcomes {
            let (t, c) = if l < n_cont {
                let shared: f64 = rng.sample(StandardNormal);
                let t: f64 = shared + rng.sample::<f64, _>(StandardNormal) + effect(l);
                (t, shared + rng.sample::<f64, _>(StandardNormal))
            } else {
                let base = 0.3;
                let lift = if l < n_signals { 0.25 } else { 0.0 };
                (f64::from(u8::from(rng.gen_bool(base + lift))), f64::from(u8::from(rng.gen_bool(base))))
            };
            // sprinkle a few missing values
            let miss = rng.gen_bool(0.02);
            tv.push((!miss).then_some(t));
            cv.push(Some(c));
        }
        sets.push(MatchedSet {
            id: format!("p{k}"),
            units: vec![Unit { z: true, values: tv }, Unit { z: false, values: cv }],
        });
    }
    let kinds = (0..n_outcomes)
        .map(|l| if l < n_cont { OutcomeKind::Continuous } else { OutcomeKind::Binary })
        .collect();
    MatchedSample::new(sets, outcome_names(n_outcomes), kinds)
}
