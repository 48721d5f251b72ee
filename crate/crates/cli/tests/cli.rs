use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sensplit::matched_data::{MatchedSample, Schema};
use sensplit::score_stats::{score, ScoreSpec};
use sensplit::sensitivity::analyze_sample;
use sensplit::simulation::synthetic_study;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sensplit"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn unit_csv(sample: &MatchedSample) -> String {
    let mut s = format!("set_id,z,{}\n", sample.outcome_names.join(","));
    for set in &sample.sets {
        for u in &set.units {
            let vals: Vec<String> =
                u.values.iter().map(|v| v.map_or_else(|| "NA".to_string(), |x| x.to_string())).collect();
            s.push_str(&format!("{},{},{}\n", set.id, u8::from(u.z), vals.join(",")));
        }
    }
    s
}

/// 120 pairs, 10 outcomes (last two binary), 3 strong signals.
fn fixture(dir: &Path) -> PathBuf {
    let sample = synthetic_study(120, 10, 2, 3, 2.0, 5).unwrap();
    let p = dir.join("pairs.csv");
    fs::write(&p, unit_csv(&sample)).unwrap();
    p
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# manifest=manifest.json"));
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn col(rows: &[Vec<String>], name: &str) -> Vec<String> {
    let k = rows[0].iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    rows[1..].iter().map(|r| r[k].clone()).collect()
}

#[test]
fn screen_writes_report_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path());
    let out = dir.path().join("o");
    let o = run(&[
        "screen", "--data", data.to_str().unwrap(), "--gamma", "1.5", "--alpha", "0.05", "--r", "0.2",
        "--method", "sensval", "--seed", "7", "--bootstrap", "60", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&out.join("report.csv"));
    assert_eq!(rows.len(), 11);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    let digest = manifest["inputs"][data.to_str().unwrap()].as_str().unwrap();
    assert_eq!(digest.len(), 64);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report["selected"].is_array() && report["rejected"].is_array());
}

#[test]
fn naive_at_one_rejects_signals() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path());
    let out = dir.path().join("o");
    let o = run(&[
        "screen", "--data", data.to_str().unwrap(), "--gamma", "1.0", "--method", "naive", "--seed", "3",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&out.join("report.csv"));
    let rejected = col(&rows, "rejected");
    assert_eq!(&rejected[..3], ["true", "true", "true"]);
}

#[test]
fn reruns_are_byte_identical_across_threads() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path());
    let go = |threads: &str, name: &str| {
        let out = dir.path().join(name);
        let o = run(&[
            "--threads", threads, "screen", "--data", data.to_str().unwrap(), "--gamma", "1.25", "--seed", "11",
            "--bootstrap", "80", "--out", out.to_str().unwrap(),
        ]);
        assert!(o.status.success());
        (fs::read(out.join("report.csv")).unwrap(), fs::read(out.join("report.json")).unwrap())
    };
    assert_eq!(go("1", "a"), go("3", "b"));
}

#[test]
fn gamma_grid_writes_checkmark_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path());
    let out = dir.path().join("o");
    let o = run(&[
        "screen", "--data", data.to_str().unwrap(), "--gamma-grid", "1,1.25,1.5,2,2.5,3,4,6", "--alpha", "0.1",
        "--bootstrap", "50", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success() || o.status.code() == Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    let t: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("checkmarks.json")).unwrap()).unwrap();
    assert_eq!(t["gammas"].as_array().unwrap().len(), 8);
    assert_eq!(t["rows"].as_array().unwrap().len(), 10);
    assert!(out.join("report_gamma2.5.csv").exists());
}

#[test]
fn sensitivity_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path());
    let out = dir.path().join("o");
    let o = run(&["sensitivity", "--data", data.to_str().unwrap(), "--gamma", "1.0", "--out", out.to_str().unwrap()]);
    assert!(o.status.success() || o.status.code() == Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&out.join("sensitivity.csv"));
    assert_eq!(col(&rows, "p_upper"), col(&rows, "p_lower"));
    let exact = col(&rows, "exact_tail");
    assert_eq!(&exact[8..], ["true", "true"]);
    assert!(exact[..8].iter().all(|e| e == "false"));

    // parity with direct library calls on the first outcome
    let sample = sensplit::matched_data::ingest_csv(&data, &Schema::default()).unwrap();
    let ids: Vec<usize> = (0..sample.n_sets()).collect();
    let dir0 = sensplit::matched_data::estimate_direction(&sample, 0, &ids).unwrap();
    let y = sensplit::matched_data::differences(&sample, 0, dir0, &ids).unwrap().y;
    let res = analyze_sample(&score(&y, &ScoreSpec::Wilcoxon).unwrap(), 1.0, 0.05, false).unwrap();
    assert_eq!(col(&rows, "p_upper")[0].parse::<f64>().unwrap(), res.p_upper);
    assert_eq!(col(&rows, "kappa_star")[0].parse::<f64>().unwrap(), res.kappa_star);
}

#[test]
fn mcnemar_routes_to_exact_tail() {
    let dir = tempfile::tempdir().unwrap();
    let csv = "set_id,z,b\n1,1,1\n1,0,0\n2,1,1\n2,0,0\n3,1,0\n3,0,1\n4,1,1\n4,0,1\n5,1,1\n5,0,0\n";
    let data = dir.path().join("b.csv");
    fs::write(&data, csv).unwrap();
    let out = dir.path().join("o");
    let o = run(&[
        "sensitivity", "--data", data.to_str().unwrap(), "--stat", "mcnemar", "--gamma", "1.5", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(matches!(o.status.code(), Some(0 | 4)), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(col(&read_csv(&out.join("sensitivity.csv")), "exact_tail"), ["true"]);
}

#[test]
fn scree_rows_follow_grid() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path());
    let out = dir.path().join("o");
    let o = run(&[
        "scree", "--data", data.to_str().unwrap(), "--gamma-grid", "1,1.25,1.5", "--method", "naive", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_eq!(read_csv(&out.join("scree.csv")).len(), 4);

    let out2 = dir.path().join("o2");
    let o = run(&["scree", "--data", data.to_str().unwrap(), "--method", "naive", "--out", out2.to_str().unwrap()]);
    assert!(o.status.success());
    let counts: Vec<usize> =
        col(&read_csv(&out2.join("scree.csv")), "n_selected").iter().map(|c| c.parse().unwrap()).collect();
    assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
}

#[test]
fn simulate_single_replicate_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let o = run(&["simulate", "--preset", "sec3.2", "--reps", "1", "--seed", "1", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&out.join("simulate.csv"));
    assert_eq!(rows.len(), 5);
    assert!(col(&rows, "se_flag").iter().all(|f| f == "true"));

    let out = dir.path().join("g");
    let o = run(&[
        "simulate", "--preset", "data-inspired", "--reps", "1", "--sweep", "gamma=1.25,2.5", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&out.join("simulate.csv"));
    let gammas = col(&rows, "gamma_con");
    assert_eq!(gammas.len(), 8);
    assert_eq!(gammas.iter().filter(|g| *g == "2.5").count(), 4);
}

#[test]
fn simulate_reads_config_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"n_subjects": 80, "n_outcomes": 6, "n_signals": 2, "methods": ["naive", "oracle"]}"#).unwrap();
    let out = dir.path().join("s");
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--reps", "3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&out.join("simulate.csv"));
    assert_eq!(col(&rows, "method"), ["naive", "oracle"]);
    assert_eq!(col(&rows, "n_outcomes"), ["6", "6"]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["screen", "--bogus"]).status.code(), Some(2));
    let missing = dir.path().join("nope.csv");
    assert_eq!(run(&["sensitivity", "--data", missing.to_str().unwrap()]).status.code(), Some(3));
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "set_id,z,a\n1,1,x\n1,0,2\n").unwrap();
    let o = run(&["sensitivity", "--data", bad.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("row 2"));
    let data = fixture(dir.path());
    let o = run(&["screen", "--data", data.to_str().unwrap(), "--alpha-l", "fixed:0.04,0.04", "--gamma", "1"]);
    assert_eq!(o.status.code(), Some(2));
}
