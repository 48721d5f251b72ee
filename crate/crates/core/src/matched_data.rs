//! Matched samples: ingestion, planning/analysis splits and per-outcome
//! treated-minus-control differences.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest matched set accepted at ingestion.
pub const P_MAX: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    pub z: bool,
    /// One slot per outcome; `None` marks a missing value.
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedSet {
    pub id: String,
    pub units: Vec<Unit>,
}

impl MatchedSet {
    pub fn n_treated(&self) -> usize {
        self.units.iter().filter(|u| u.z).count()
    }

    /// Index of the lone unit: the treated unit when there is one treated,
    /// otherwise the single control.
    pub fn lone(&self) -> usize {
        let treated = self.n_treated();
        let want = treated == 1;
        self.units.iter().position(|u| u.z == want).expect("validated set")
    }

    /// Whether the lone unit is treated.
    pub fn lone_is_treated(&self) -> bool {
        self.n_treated() == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Pairs,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedSample {
    pub sets: Vec<MatchedSet>,
    pub outcome_names: Vec<String>,
    pub outcome_kinds: Vec<OutcomeKind>,
}

impl MatchedSample {
    /// Validates the structural invariants and builds the sample.
    pub fn new(
        sets: Vec<MatchedSet>,
        outcome_names: Vec<String>,
        outcome_kinds: Vec<OutcomeKind>,
    ) -> Result<Self> {
        let l = outcome_names.len();
        if outcome_kinds.len() != l {
            return Err(Error::config("outcome kinds and names differ in length"));
        }
        for set in &sets {
            let n = set.units.len();
            let bad = |msg: String| Error::Structure { set_id: set.id.clone(), msg };
            if n < 2 {
                return Err(bad(format!("{n} unit(s); need at least 2")));
            }
            if n > P_MAX {
                return Err(bad(format!("{n} units exceeds the cap of {P_MAX}")));
            }
            let treated = set.n_treated();
            if n == 2 && treated != 1 {
                return Err(bad(format!("pair has {treated} treated units")));
            }
            if treated != 1 && treated != n - 1 {
                return Err(bad(format!(
                    "{treated} treated of {n}; need one treated or one control"
                )));
            }
            if let Some(u) = set.units.iter().find(|u| u.values.len() != l) {
                return Err(bad(format!("unit has {} outcome slots, expected {l}", u.values.len())));
            }
        }
        Ok(MatchedSample { sets, outcome_names, outcome_kinds })
    }

    /// Pairs from already-differenced values; the control carries 0.
    pub fn from_differences(outcome_names: Vec<String>, rows: Vec<Vec<Option<f64>>>) -> Result<Self> {
        let l = outcome_names.len();
        let kinds = (0..l)
            .map(|j| detect_kind(rows.iter().filter_map(|r| r.get(j).copied().flatten()), true))
            .collect();
        let sets = rows
            .into_iter()
            .enumerate()
            .map(|(i, values)| MatchedSet {
                id: i.to_string(),
                units: vec![
                    Unit { z: true, values },
                    Unit { z: false, values: vec![Some(0.0); l] },
                ],
            })
            .collect();
        MatchedSample::new(sets, outcome_names, kinds)
    }

    pub fn n_sets(&self) -> usize {
        self.sets.len()
    }

    pub fn n_outcomes(&self) -> usize {
        self.outcome_names.len()
    }

    pub fn mode(&self) -> Mode {
        if self.sets.iter().all(|s| s.units.len() == 2) {
            Mode::Pairs
        } else {
            Mode::Full
        }
    }

    pub fn outcome_index(&self, name: &str) -> Option<usize> {
        self.outcome_names.iter().position(|n| n == name)
    }
}

fn detect_kind(values: impl Iterator<Item = f64>, differenced: bool) -> OutcomeKind {
    let mut any = false;
    for v in values {
        any = true;
        let ok = v == 0.0 || v == 1.0 || (differenced && v == -1.0);
        if !ok {
            return OutcomeKind::Continuous;
        }
    }
    if any {
        OutcomeKind::Binary
    } else {
        OutcomeKind::Continuous
    }
}

/// Column mapping for [`ingest_csv`].
///
/// Parsed from `key=value` pairs separated by commas, e.g.
/// `set=pair,z=treat,outcomes=a;b,binary=b`. Keys: `set`, `z`,
/// `outcomes`, `binary`, `format` (`units` or `differenced`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Schema {
    pub set_id: String,
    pub treatment: String,
    /// `None` means every remaining column.
    pub outcomes: Option<Vec<String>>,
    pub binary: Vec<String>,
    /// `None` infers the format from the presence of the treatment column.
    pub differenced: Option<bool>,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            set_id: "set_id".into(),
            treatment: "z".into(),
            outcomes: None,
            binary: Vec::new(),
            differenced: None,
        }
    }
}

impl FromStr for Schema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut schema = Schema::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::config(format!("schema entry `{part}` is not key=value")))?;
            let list = || v.split(';').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect();
            match k.trim() {
                "set" | "set_id" => schema.set_id = v.trim().into(),
                "z" | "treatment" => schema.treatment = v.trim().into(),
                "outcomes" => schema.outcomes = Some(list()),
                "binary" => schema.binary = list(),
                "format" => {
                    schema.differenced = Some(match v.trim() {
                        "units" => false,
                        "differenced" => true,
                        other => return Err(Error::config(format!("unknown format `{other}`"))),
                    })
                }
                other => return Err(Error::config(format!("unknown schema key `{other}`"))),
            }
        }
        Ok(schema)
    }
}

fn parse_cell(cell: &str, row: usize, col: &str) -> Result<Option<f64>> {
    let cell = cell.trim();
    if cell.is_empty() || cell == "NA" {
        return Ok(None);
    }
    cell.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Parse { row, msg: format!("column `{col}`: cannot parse `{cell}`") })
}

/// Reads a matched sample from CSV.
///
/// Unit format has one row per unit (`set_id,z,<outcomes...>`); the
/// differenced format has one row per pair (`set_id,<outcomes...>`).
/// Empty cells and `NA` are missing. Row numbers in errors count the
/// header as row 1.
pub fn ingest_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<MatchedSample> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io { path: path.into(), source })?;
    ingest_reader(file, schema)
}

pub fn ingest_reader(reader: impl std::io::Read, schema: &Schema) -> Result<MatchedSample> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse { row: 1, msg: e.to_string() })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let set_col = col(&schema.set_id)
        .ok_or_else(|| Error::Parse { row: 1, msg: format!("missing set column `{}`", schema.set_id) })?;
    let z_col = col(&schema.treatment);
    let differenced = schema.differenced.unwrap_or(z_col.is_none());
    if !differenced && z_col.is_none() {
        return Err(Error::Parse { row: 1, msg: format!("missing treatment column `{}`", schema.treatment) });
    }
    let names: Vec<String> = match &schema.outcomes {
        Some(list) => list.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != set_col && (differenced || Some(*i) != z_col))
            .map(|(_, h)| h.to_string())
            .collect(),
    };
    if names.is_empty() {
        return Err(Error::Parse { row: 1, msg: "no outcome columns".into() });
    }
    let cols: Vec<usize> = names
        .iter()
        .map(|n| col(n).ok_or_else(|| Error::Parse { row: 1, msg: format!("missing outcome column `{n}`") }))
        .collect::<Result<_>>()?;
    for b in &schema.binary {
        if !names.contains(b) {
            return Err(Error::config(format!("binary column `{b}` is not an outcome")));
        }
    }

    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, Vec<Unit>> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Parse { row, msg: e.to_string() })?;
        let id = rec.get(set_col).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(Error::Parse { row, msg: "empty set id".into() });
        }
        let values = cols
            .iter()
            .zip(&names)
            .map(|(&c, n)| parse_cell(rec.get(c).unwrap_or(""), row, n))
            .collect::<Result<Vec<_>>>()?;
        let units = by_id.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Vec::new()
        });
        if differenced {
            if !units.is_empty() {
                return Err(Error::Structure { set_id: id, msg: "repeated id in differenced format".into() });
            }
            units.push(Unit { z: true, values });
            units.push(Unit { z: false, values: vec![Some(0.0); cols.len()] });
        } else {
            let z = match rec.get(z_col.unwrap()).map(str::trim) {
                Some("1") => true,
                Some("0") => false,
                other => {
                    return Err(Error::Parse {
                        row,
                        msg: format!("treatment must be 0 or 1, got `{}`", other.unwrap_or("")),
                    })
                }
            };
            units.push(Unit { z, values });
        }
    }
    let sets: Vec<MatchedSet> = order
        .into_iter()
        .map(|id| {
            let units = by_id.remove(&id).unwrap();
            MatchedSet { id, units }
        })
        .collect();
    let kinds = names
        .iter()
        .enumerate()
        .map(|(j, n)| {
            if schema.binary.contains(n) {
                return OutcomeKind::Binary;
            }
            let vals = sets
                .iter()
                .flat_map(|s| s.units.iter().filter(|u| !differenced || u.z))
                .filter_map(|u| u.values[j]);
            detect_kind(vals, differenced)
        })
        .collect();
    MatchedSample::new(sets, names, kinds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitHandle {
    pub planning_ids: Vec<usize>,
    pub analysis_ids: Vec<usize>,
    pub r: f64,
    pub seed: u64,
}

impl SplitHandle {
    /// Realized planning fraction.
    pub fn r_eff(&self) -> f64 {
        let n = self.planning_ids.len() + self.analysis_ids.len();
        self.planning_ids.len() as f64 / n as f64
    }
}

/// Uniform set-level partition with `round(r·I)` planning sets.
pub fn split(sample: &MatchedSample, r: f64, seed: u64) -> Result<SplitHandle> {
    split_n(sample.n_sets(), r, seed)
}

pub fn split_n(n: usize, r: f64, seed: u64) -> Result<SplitHandle> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::config(format!("r must lie in (0,1), got {r}")));
    }
    let k = (r * n as f64).round() as usize;
    if k == 0 || k >= n {
        return Err(Error::DegenerateSplit { r, n });
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut planning_ids = ids[..k].to_vec();
    let mut analysis_ids = ids[k..].to_vec();
    planning_ids.sort_unstable();
    analysis_ids.sort_unstable();
    Ok(SplitHandle { planning_ids, analysis_ids, r, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Direction {
    #[default]
    #[serde(rename = "+1")]
    Positive,
    #[serde(rename = "-1")]
    Negative,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Positive => 1.0,
            Direction::Negative => -1.0,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Positive => "+1",
            Direction::Negative => "-1",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairDifferences {
    pub outcome_index: usize,
    pub y: Vec<f64>,
    pub direction: Direction,
    pub dropped_sets: usize,
    /// Set indices behind each entry of `y`.
    pub set_ids: Vec<usize>,
}

impl PairDifferences {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Treated-minus-control differences over `ids`, times `direction`.
/// Pairs missing either value are dropped.
pub fn differences(
    sample: &MatchedSample,
    outcome: usize,
    direction: Direction,
    ids: &[usize],
) -> Result<PairDifferences> {
    if outcome >= sample.n_outcomes() {
        return Err(Error::config(format!("outcome index {outcome} out of range")));
    }
    let sign = direction.sign();
    let mut y = Vec::with_capacity(ids.len());
    let mut kept = Vec::with_capacity(ids.len());
    let mut dropped = 0;
    for &id in ids {
        let set = &sample.sets[id];
        if set.units.len() != 2 {
            return Err(Error::Structure {
                set_id: set.id.clone(),
                msg: "pair differences need pair mode".into(),
            });
        }
        let (t, c) = if set.units[0].z { (&set.units[0], &set.units[1]) } else { (&set.units[1], &set.units[0]) };
        match (t.values[outcome], c.values[outcome]) {
            (Some(a), Some(b)) => {
                y.push(sign * (a - b));
                kept.push(id);
            }
            _ => dropped += 1,
        }
    }
    if y.is_empty() {
        return Err(Error::EmptyOutcome(sample.outcome_names[outcome].clone()));
    }
    Ok(PairDifferences { outcome_index: outcome, y, direction, dropped_sets: dropped, set_ids: kept })
}

/// Sign of the mean difference over `ids`; a zero mean gives `Positive`.
pub fn estimate_direction(sample: &MatchedSample, outcome: usize, ids: &[usize]) -> Result<Direction> {
    let d = differences(sample, outcome, Direction::Positive, ids)?;
    Ok(direction_of(&d.y))
}

pub fn direction_of(y: &[f64]) -> Direction {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    if mean < 0.0 {
        Direction::Negative
    } else {
        Direction::Positive
    }
}
