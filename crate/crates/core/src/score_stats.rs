//! Score functions and the normalized signed score statistic.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};

/// Above this many nonzero differences the U-statistic scores switch to
/// the smooth approximation.
pub const USTAT_EXACT_MAX: usize = 10_000;

/// Piecewise-linear score function on (0,1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiTable {
    u: Vec<f64>,
    v: Vec<f64>,
}

impl PsiTable {
    pub fn new(mut points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::SpecMismatch("psi table is empty".into()));
        }
        if points.iter().any(|&(u, v)| !u.is_finite() || !v.is_finite() || v < 0.0) {
            return Err(Error::SpecMismatch("psi table needs finite, nonnegative values".into()));
        }
        if points.iter().map(|p| p.1).sum::<f64>() <= 0.0 {
            return Err(Error::SpecMismatch("psi table sums to zero".into()));
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (u, v) = points.into_iter().unzip();
        Ok(PsiTable { u, v })
    }

    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Parse { row: 0, msg: format!("{}: {e}", path.display()) })?;
        let mut points = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse { row: i + 1, msg: e.to_string() })?;
            let parse = |j: usize| rec.get(j).and_then(|s| s.parse::<f64>().ok());
            match (parse(0), parse(1)) {
                (Some(u), Some(v)) => points.push((u, v)),
                _ if i == 0 => continue,
                _ => return Err(Error::Parse { row: i + 1, msg: "expected `u,psi`".into() }),
            }
        }
        PsiTable::new(points)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let i = self.u.partition_point(|&u| u < x);
        if i == 0 {
            return self.v[0];
        }
        if i == self.u.len() {
            return self.v[i - 1];
        }
        let (u0, u1, v0, v1) = (self.u[i - 1], self.u[i], self.v[i - 1], self.v[i]);
        if u1 == u0 {
            v1
        } else {
            v0 + (v1 - v0) * (x - u0) / (u1 - u0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSpec {
    Sign,
    Wilcoxon,
    Mcnemar,
    Ustat { m: usize, lo: usize, hi: usize },
    Psi(PsiTable),
}

impl ScoreSpec {
    pub fn ustat(m: usize, lo: usize, hi: usize) -> Result<Self> {
        if !(1 <= lo && lo <= hi && hi <= m) {
            return Err(Error::SpecMismatch(format!("ustat needs 1 <= mlo <= mhi <= m, got ({m},{lo},{hi})")));
        }
        Ok(ScoreSpec::Ustat { m, lo, hi })
    }

    /// Whether every nonzero difference receives the same score.
    pub fn equal_scores(&self) -> bool {
        matches!(self, ScoreSpec::Sign | ScoreSpec::Mcnemar)
    }

    /// Score at position `pos` (1-based) among `n` ranked nonzero |y|.
    pub fn position_score(&self, pos: usize, n: usize) -> f64 {
        match self {
            ScoreSpec::Sign | ScoreSpec::Mcnemar => 1.0,
            ScoreSpec::Wilcoxon => pos as f64,
            ScoreSpec::Ustat { m, lo, hi } => ustat_score(pos, n, *m, *lo, *hi),
            ScoreSpec::Psi(t) => t.eval(pos as f64 / (n as f64 + 1.0)),
        }
    }

    /// Score at a fractional rank, interpolating between positions.
    pub fn rank_score(&self, rank: f64, n: usize) -> f64 {
        match self {
            ScoreSpec::Sign | ScoreSpec::Mcnemar => 1.0,
            ScoreSpec::Wilcoxon => rank,
            ScoreSpec::Psi(t) => t.eval(rank / (n as f64 + 1.0)),
            ScoreSpec::Ustat { .. } => {
                let lo = (rank.floor() as usize).clamp(1, n);
                let hi = (rank.ceil() as usize).clamp(1, n);
                let w = rank - rank.floor();
                (1.0 - w) * self.position_score(lo, n) + w * self.position_score(hi, n)
            }
        }
    }
}

impl FromStr for ScoreSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "sign" => return Ok(ScoreSpec::Sign),
            "wilcoxon" => return Ok(ScoreSpec::Wilcoxon),
            "mcnemar" => return Ok(ScoreSpec::Mcnemar),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix("ustat:") {
            let parts: Vec<usize> = rest
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::SpecMismatch(format!("bad ustat parameters `{rest}`")))?;
            if let [m, lo, hi] = parts[..] {
                return ScoreSpec::ustat(m, lo, hi);
            }
            return Err(Error::SpecMismatch(format!("ustat takes m,mlo,mhi, got `{rest}`")));
        }
        if let Some(path) = s.strip_prefix("psi:@") {
            return PsiTable::from_csv(path).map(ScoreSpec::Psi);
        }
        Err(Error::SpecMismatch(format!("unknown statistic `{s}`")))
    }
}

impl fmt::Display for ScoreSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreSpec::Sign => f.write_str("sign"),
            ScoreSpec::Wilcoxon => f.write_str("wilcoxon"),
            ScoreSpec::Mcnemar => f.write_str("mcnemar"),
            ScoreSpec::Ustat { m, lo, hi } => write!(f, "ustat:{m},{lo},{hi}"),
            ScoreSpec::Psi(_) => f.write_str("psi"),
        }
    }
}

/// U-statistic score of the `rank`-th smallest of `n` absolute differences.
///
/// Uses the exact binomial-coefficient form for `m <= n <= 10^4` and the
/// smooth approximation `n^-1 Σ k C(m,k) p^(k-1) (1-p)^(m-k)`, `p = rank/n`,
/// otherwise.
pub fn ustat_score(rank: usize, n: usize, m: usize, lo: usize, hi: usize) -> f64 {
    if n >= m && n <= USTAT_EXACT_MAX {
        ustat_score_exact(rank, n, m, lo, hi)
    } else {
        ustat_score_approx(rank, n, m, lo, hi)
    }
}

pub fn ustat_score_exact(rank: usize, n: usize, m: usize, lo: usize, hi: usize) -> f64 {
    let below = (rank - 1) as u64;
    let above = (n - rank) as u64;
    let norm = ln_binomial(n as u64, m as u64);
    (lo..=hi)
        .filter(|&k| (k as u64 - 1) <= below && (m - k) as u64 <= above)
        .map(|k| (ln_binomial(below, k as u64 - 1) + ln_binomial(above, (m - k) as u64) - norm).exp())
        .sum()
}

pub fn ustat_score_approx(rank: usize, n: usize, m: usize, lo: usize, hi: usize) -> f64 {
    let p = rank as f64 / n as f64;
    let s: f64 = (lo..=hi)
        .map(|k| {
            k as f64
                * ln_binomial(m as u64, k as u64).exp()
                * p.powi(k as i32 - 1)
                * (1.0 - p).powi((m - k) as i32)
        })
        .sum();
    s / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredSample {
    /// `y >= 0` for each retained difference.
    pub sgn: Vec<bool>,
    pub q: Vec<f64>,
    pub t: f64,
    pub sigma_qi_sq: f64,
    pub c_qi: f64,
    /// Number of nonzero scores.
    pub n: usize,
    pub sum_q: f64,
    pub sum_q2: f64,
    pub equal_scores: bool,
}

impl ScoredSample {
    /// `Σq²/(Σq)²`, i.e. `σ²_{q,I}/I`.
    pub fn var_ratio(&self) -> f64 {
        self.sum_q2 / (self.sum_q * self.sum_q)
    }

    /// Count of positive signs among nonzero scores.
    pub fn n_positive(&self) -> usize {
        self.sgn.iter().zip(&self.q).filter(|&(&s, &q)| s && q > 0.0).count()
    }
}

/// Average-rank positions (1-based) of the nonzero |y|, with tie groups.
/// Returns `(index, group_start, group_end)` triples in ascending |y|.
fn ranked_nonzero(y: &[f64]) -> Vec<(usize, usize, usize)> {
    let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] != 0.0).collect();
    idx.sort_by(|&a, &b| y[a].abs().total_cmp(&y[b].abs()));
    let mut out = Vec::with_capacity(idx.len());
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && y[idx[end]].abs() == y[idx[start]].abs() {
            end += 1;
        }
        for &i in &idx[start..end] {
            out.push((i, start + 1, end));
        }
        start = end;
    }
    out
}

/// Scores a vector of differences.
///
/// Zero differences get `q = 0`. Ties in `|y|` share the mean of the
/// position scores they occupy, which for Wilcoxon is the average rank.
pub fn score(y: &[f64], spec: &ScoreSpec) -> Result<ScoredSample> {
    if y.is_empty() {
        return Err(Error::EmptyOutcome("differences".into()));
    }
    if matches!(spec, ScoreSpec::Mcnemar) && y.iter().any(|v| v.abs() != 0.0 && v.abs() != 1.0) {
        return Err(Error::SpecMismatch("mcnemar needs differences in {-1, 0, 1}".into()));
    }
    let ranked = ranked_nonzero(y);
    let n = ranked.len();
    let mut q = vec![0.0; y.len()];
    let mut cache: Option<(usize, f64)> = None;
    for &(i, a, b) in &ranked {
        let s = match cache {
            Some((start, s)) if start == a => s,
            _ => {
                let s = if spec.equal_scores() {
                    1.0
                } else {
                    (a..=b).map(|p| spec.position_score(p, n)).sum::<f64>() / (b - a + 1) as f64
                };
                cache = Some((a, s));
                s
            }
        };
        q[i] = s;
    }
    let sgn: Vec<bool> = y.iter().map(|&v| v >= 0.0).collect();
    from_scores(sgn, q, spec.equal_scores())
}

/// Builds a scored sample from precomputed signs and scores.
pub fn from_scores(sgn: Vec<bool>, q: Vec<f64>, equal_scores: bool) -> Result<ScoredSample> {
    let (sigma_qi_sq, c_qi) = moments(&q)?;
    let sum_q: f64 = q.iter().sum();
    let sum_q2: f64 = q.iter().map(|v| v * v).sum();
    let pos: f64 = sgn.iter().zip(&q).filter(|p| *p.0).map(|p| p.1).sum();
    let n = q.iter().filter(|&&v| v > 0.0).count();
    Ok(ScoredSample { sgn, q, t: pos / sum_q, sigma_qi_sq, c_qi, n, sum_q, sum_q2, equal_scores })
}

/// `σ²_{q,I} = (Σq²/I)/(Σq/I)²` and `c_{q,I} = (Σq³/I)/(Σq/I)³` over nonzero `q`.
pub fn moments(q: &[f64]) -> Result<(f64, f64)> {
    let nz = q.iter().filter(|&&v| v > 0.0);
    let (mut n, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for &v in nz {
        n += 1.0;
        s1 += v;
        s2 += v * v;
        s3 += v * v * v;
    }
    if n == 0.0 {
        return Err(Error::EmptyOutcome("scores".into()));
    }
    let m1 = s1 / n;
    Ok(((s2 / n) / (m1 * m1), (s3 / n) / (m1 * m1 * m1)))
}
