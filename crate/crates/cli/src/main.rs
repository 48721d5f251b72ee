use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use sensplit::fullmatch::{prepare_full, screen_full, sensitivity_value_full, statistic_full, worst_case_p_full, FullScale};
use sensplit::matched_data::{estimate_direction, ingest_csv, split, Direction, MatchedSample, Mode, Schema};
use sensplit::score_stats::score;
use sensplit::screening::{
    prepare_pairs, scree, screen, table_report, AlphaPolicy, Method, Planning, ScreeningPlan, SelectionReport,
    StatChoice,
};
use sensplit::sensitivity::{analyze_sample, Saturation};
use sensplit::simulation::{expand, preset, run_experiment, write_csv, SimConfig, Sweep};
use sensplit::Error;

/// Split-sample screening and sensitivity analysis for matched observational studies.
#[derive(Parser, Debug)]
#[command(name = "sensplit", version)]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Worst-case p-values and sensitivity values on the whole sample.
    Sensitivity(SensitivityArgs),
    /// Split, screen on the planning sample, test the selection.
    Screen(ScreenArgs),
    /// Number of selected outcomes along a Γ grid.
    Scree(ScreenArgs),
    /// Monte Carlo power / FWER experiments.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug, Serialize)]
struct DataArgs {
    /// Matched-sample CSV.
    #[arg(long)]
    data: PathBuf,
    /// Column mapping, e.g. `set=pair,z=treat,binary=b1;b2`.
    #[arg(long, default_value = "")]
    schema: String,
    /// Score: auto | sign | wilcoxon | mcnemar | ustat:m,lo,hi | psi:@file.
    #[arg(long, default_value = "auto")]
    stat: String,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct SensitivityArgs {
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Args, Debug, Serialize)]
struct ScreenArgs {
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    /// Control level Γ_con.
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    /// Comma-separated Γ_con grid; for `screen` this writes a checkmark table.
    #[arg(long, value_delimiter = ',')]
    gamma_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Defaults to --alpha.
    #[arg(long)]
    alpha_plan: Option<f64>,
    /// Defaults to --alpha.
    #[arg(long)]
    alpha_coverage: Option<f64>,
    /// bonferroni | dynamic | fixed:a,b,...
    #[arg(long, default_value = "dynamic")]
    alpha_l: String,
    #[arg(long, default_value_t = 0.2)]
    r: f64,
    /// naive | sensval | approx | sensval-full
    #[arg(long, default_value = "sensval")]
    method: String,
    #[arg(long, default_value_t = 250)]
    bootstrap: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    /// Named experiment; see `--preset list`.
    #[arg(long)]
    preset: Option<String>,
    /// JSON SimConfig; fields override the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Grid over a field, e.g. `tau=0.5,1`; repeat for a cartesian product.
    #[arg(long)]
    sweep: Vec<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Io(String),
    /// Output was written but some statistic hit the κ bracket.
    Saturated,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_data_error() {
            Failure::Data(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    command: Vec<String>,
    config: &'a C,
    seed: Option<u64>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    version: &'static str,
    started_unix: u64,
    finished_unix: u64,
}

/// Collects output files and writes `manifest.json` next to them.
struct Run {
    out: PathBuf,
    started: u64,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

const MANIFEST: &str = "manifest.json";

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl Run {
    fn new(out: &Path) -> CliResult<Self> {
        fs::create_dir_all(out)?;
        Ok(Run { out: out.to_path_buf(), started: unix_now(), inputs: BTreeMap::new(), outputs: Vec::new() })
    }

    fn input(&mut self, path: &Path) -> CliResult {
        let bytes = fs::read(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
        self.inputs.insert(path.display().to_string(), format!("{:x}", Sha256::digest(&bytes)));
        Ok(())
    }

    /// CSV files start with a comment line pointing at the manifest.
    fn csv(&mut self, name: &str, body: impl FnOnce(&mut Vec<u8>) -> CliResult) -> CliResult {
        let mut buf = format!("# manifest={MANIFEST}\n").into_bytes();
        body(&mut buf)?;
        self.file(name, &buf)
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> CliResult {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| Failure::Io(e.to_string()))?;
        s.push('\n');
        self.file(name, s.as_bytes())
    }

    fn file(&mut self, name: &str, bytes: &[u8]) -> CliResult {
        fs::write(self.out.join(name), bytes)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn finish(self, config: &impl Serialize, seed: Option<u64>) -> CliResult {
        let m = Manifest {
            command: std::env::args().collect(),
            config,
            seed,
            inputs: self.inputs,
            outputs: self.outputs,
            version: env!("CARGO_PKG_VERSION"),
            started_unix: self.started,
            finished_unix: unix_now(),
        };
        let mut f = fs::File::create(self.out.join(MANIFEST))?;
        serde_json::to_writer_pretty(&mut f, &m).map_err(|e| Failure::Io(e.to_string()))?;
        writeln!(f)?;
        Ok(())
    }
}

fn load(d: &DataArgs) -> CliResult<(MatchedSample, StatChoice)> {
    let schema: Schema = d.schema.parse()?;
    let sample = ingest_csv(&d.data, &schema)?;
    let stat: StatChoice = d.stat.parse()?;
    Ok((sample, stat))
}

#[derive(Serialize)]
struct SensitivityRow<'a> {
    outcome: &'a str,
    n: usize,
    direction: Direction,
    t: Option<f64>,
    gamma: f64,
    p_upper: f64,
    p_lower: Option<f64>,
    kappa_star: f64,
    gamma_star: f64,
    exact_tail: bool,
    saturated: Saturation,
}

fn cmd_sensitivity(a: &SensitivityArgs) -> CliResult {
    let (sample, stat) = load(&a.data)?;
    let mut run = Run::new(&a.data.out)?;
    run.input(&a.data.data)?;
    let all: Vec<usize> = (0..sample.n_sets()).collect();
    let mut rows = Vec::new();
    for l in 0..sample.n_outcomes() {
        let name = &sample.outcome_names[l];
        let spec = stat.for_kind(sample.outcome_kinds[l]);
        let dir = estimate_direction(&sample, l, &all)?;
        let row = match sample.mode() {
            Mode::Pairs => {
                let y = sensplit::matched_data::differences(&sample, l, dir, &all)?;
                let s = score(&y.y, &spec)?;
                let exact = spec.equal_scores();
                let res = analyze_sample(&s, a.gamma, a.alpha, exact)?;
                SensitivityRow {
                    outcome: name,
                    n: s.n,
                    direction: dir,
                    t: Some(s.t),
                    gamma: a.gamma,
                    p_upper: res.p_upper,
                    p_lower: Some(res.p_lower),
                    kappa_star: res.kappa_star,
                    gamma_star: res.gamma_star,
                    exact_tail: res.used_exact_tail,
                    saturated: res.saturated,
                }
            }
            Mode::Full => {
                let (s, _dropped) = statistic_full(&sample, l, &spec, dir, &all)?;
                let sv = sensitivity_value_full(&s, a.alpha)?;
                SensitivityRow {
                    outcome: name,
                    n: s.n_sets,
                    direction: dir,
                    t: None,
                    gamma: a.gamma,
                    p_upper: worst_case_p_full(&s, a.gamma),
                    p_lower: None,
                    kappa_star: sv.kappa,
                    gamma_star: sv.gamma,
                    exact_tail: false,
                    saturated: sv.saturated,
                }
            }
        };
        rows.push(row);
    }
    run.csv("sensitivity.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        for r in &rows {
            w.serialize(r).map_err(|e| Failure::Io(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    })?;
    run.json("sensitivity.json", &rows)?;
    run.finish(a, None)?;
    if rows.iter().any(|r| r.saturated.is_saturated()) {
        return Err(Failure::Saturated);
    }
    Ok(())
}

fn plan_of(a: &ScreenArgs) -> CliResult<ScreeningPlan> {
    let method: Method = a.method.parse()?;
    let alpha_l: AlphaPolicy = a.alpha_l.parse()?;
    let plan = ScreeningPlan {
        alpha_plan: a.alpha_plan.unwrap_or(a.alpha),
        alpha_coverage: a.alpha_coverage.unwrap_or(a.alpha),
        alpha_l,
        r: a.r,
        bootstrap: a.bootstrap,
        seed: a.seed,
        ..ScreeningPlan::new(method, a.gamma, a.alpha)
    };
    plan.validate()?;
    Ok(plan)
}

fn write_report(run: &mut Run, stem: &str, rep: &SelectionReport) -> CliResult {
    run.csv(&format!("{stem}.csv"), |buf| Ok(rep.write_csv(buf)?))?;
    run.json(&format!("{stem}.json"), rep)
}

fn cmd_screen(a: &ScreenArgs) -> CliResult {
    let (sample, stat) = load(&a.data)?;
    let plan = plan_of(a)?;
    let mut run = Run::new(&a.data.out)?;
    run.input(&a.data.data)?;
    let sp = split(&sample, plan.r, a.seed)?;
    // the selection inequality uses the realized planning fraction
    let plan = ScreeningPlan { r: sp.r_eff(), ..plan };
    let mut saturated = false;
    match (sample.mode(), &a.gamma_grid) {
        (Mode::Pairs, Some(grid)) => {
            let outcomes = prepare_pairs(&sample, &sp, &stat, None)?;
            let (table, reports) = table_report(&outcomes, &plan, grid)?;
            run.json("checkmarks.json", &table)?;
            for (g, rep) in grid.iter().zip(&reports) {
                write_report(&mut run, &format!("report_gamma{g}"), rep)?;
                saturated |= rep.any_saturated();
            }
        }
        (Mode::Pairs, None) => {
            let outcomes = prepare_pairs(&sample, &sp, &stat, None)?;
            let rep = screen(&outcomes, &plan)?;
            write_report(&mut run, "report", &rep)?;
            saturated = rep.any_saturated();
        }
        (Mode::Full, grid) => {
            let outcomes = prepare_full(&sample, &sp, &stat, None);
            let grid = grid.clone().unwrap_or_else(|| vec![plan.gamma_con]);
            for &g in &grid {
                let p = ScreeningPlan { gamma_con: g, ..plan.clone() };
                let rep = screen_full(&outcomes, &p, FullScale::Gamma)?;
                let stem = if a.gamma_grid.is_some() { format!("report_gamma{g}") } else { "report".into() };
                write_report(&mut run, &stem, &rep)?;
                saturated |= rep.any_saturated();
            }
        }
    }
    run.finish(a, Some(a.seed))?;
    if saturated {
        return Err(Failure::Saturated);
    }
    Ok(())
}

fn cmd_scree(a: &ScreenArgs) -> CliResult {
    let (sample, stat) = load(&a.data)?;
    let plan = plan_of(a)?;
    if sample.mode() != Mode::Pairs {
        return Err(Failure::Usage("scree supports pair samples only".into()));
    }
    let mut run = Run::new(&a.data.out)?;
    run.input(&a.data.data)?;
    let sp = split(&sample, plan.r, a.seed)?;
    let plan = ScreeningPlan { r: sp.r_eff(), ..plan };
    let outcomes = prepare_pairs(&sample, &sp, &stat, None)?;
    let planning: Vec<Planning> = outcomes.into_iter().map(|o| o.planning).collect();
    let grid = a
        .gamma_grid
        .clone()
        .unwrap_or_else(|| (0..=12).map(|k| 1.0 + 0.25 * k as f64).collect());
    let rows = scree(&planning, &plan, &grid)?;
    run.csv("scree.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        for r in &rows {
            w.serialize(r).map_err(|e| Failure::Io(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    })?;
    run.finish(a, Some(a.seed))
}

fn cmd_simulate(a: &SimulateArgs) -> CliResult {
    if a.preset.as_deref() == Some("list") {
        for p in sensplit::simulation::PRESETS {
            println!("{p}");
        }
        return Ok(());
    }
    let mut cfg = match &a.preset {
        Some(p) => preset(p)?,
        None => SimConfig::default(),
    };
    let mut inputs = Vec::new();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
        // start from the preset and let the file override fields
        let mut base = serde_json::to_value(&cfg).map_err(|e| Failure::Io(e.to_string()))?;
        let over: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
        if let (Some(b), Some(o)) = (base.as_object_mut(), over.as_object()) {
            for (k, v) in o {
                b.insert(k.clone(), v.clone());
            }
        }
        cfg = serde_json::from_value(base).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        inputs.push(path.clone());
    }
    if let Some(r) = a.reps {
        cfg.reps = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let sweeps: Vec<Sweep> = a.sweep.iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
    let grid = expand(&cfg, &sweeps)?;
    for c in &grid {
        c.validate()?;
    }
    let mut run = Run::new(&a.out)?;
    for p in &inputs {
        run.input(p)?;
    }
    let results = grid.iter().map(run_experiment).collect::<Result<Vec<_>, _>>()?;
    run.csv("simulate.csv", |buf| Ok(write_csv(&results, buf)?))?;
    run.json("simulate.json", &results)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        base: &'a SimConfig,
        sweeps: &'a [Sweep],
    }
    run.finish(&Resolved { base: &cfg, sweeps: &sweeps }, Some(cfg.seed))?;
    for r in &results {
        if r.excluded > 0 {
            eprintln!("{}: {} replicate(s) excluded; first error: {}", r.config.name, r.excluded, r.errors[0]);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let res = match &cli.command {
        Command::Sensitivity(a) => cmd_sensitivity(a),
        Command::Screen(a) => cmd_screen(a),
        Command::Scree(a) => cmd_scree(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Data(m)) => {
            eprintln!("data error: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Io(m)) => {
            eprintln!("io error: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Saturated) => {
            eprintln!("warning: sensitivity value saturated at the κ bracket; output written");
            ExitCode::from(4)
        }
    }
}
