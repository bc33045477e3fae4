use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use folddiff::data::write_dataset;
use folddiff::report::{read_csv, ResultRow};
use folddiff::sim::{draw_dataset, MeanKind, SimConfig};
use tempfile::TempDir;

struct Fixture {
    dir: TempDir,
    counts: PathBuf,
    meta: PathBuf,
}

/// Small γ_A draw; category `c3` is zeroed in the unexposed arm when `zero_arm0` is set.
fn fixture(zero_arm0: bool) -> Fixture {
    let cfg = SimConfig { n: 120, j: 4, mean_kind: MeanKind::GammaA, ..SimConfig::default() };
    let (d, _) = draw_dataset(&cfg, 11).unwrap();
    let d = if zero_arm0 {
        let mut w = d.outcomes().to_owned();
        for (i, &a) in d.exposure().iter().enumerate() {
            if a == 0 {
                w[[i, 2]] = 0.0;
            }
        }
        d.with_outcomes(w).unwrap()
    } else {
        d
    };
    let dir = TempDir::new().unwrap();
    let counts = dir.path().join("counts.csv");
    let meta = dir.path().join("meta.csv");
    write_dataset(&d, &counts, &meta).unwrap();
    Fixture { dir, counts, meta }
}

fn folddiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_folddiff")).args(args).output().unwrap()
}

fn data_args(f: &Fixture) -> Vec<String> {
    vec![
        "--counts".into(),
        f.counts.display().to_string(),
        "--meta".into(),
        f.meta.display().to_string(),
        "--exposure".into(),
        "exposure".into(),
        "--covariates".into(),
        "x".into(),
    ]
}

fn run_estimate(f: &Fixture, out: &Path, extra: &[&str]) -> Output {
    let mut args: Vec<String> = vec!["estimate".into()];
    args.extend(data_args(f));
    args.extend(["--out".into(), out.display().to_string()]);
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    folddiff(&refs)
}

fn rows(dir: &Path) -> Vec<ResultRow> {
    read_csv(&dir.join("results.csv")).unwrap()
}

#[test]
fn mean_centered_unadjusted_sums_to_zero() {
    let f = fixture(false);
    let out = f.dir.path().join("psi1g");
    let o = run_estimate(&f, &out, &["--estimand", "psi1g", "--center", "mean"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = rows(&out);
    assert_eq!(r.len(), 4);
    let sum: f64 = r.iter().map(|r| r.estimate).sum();
    assert!(sum.abs() <= 1e-10, "sum {sum}");
    for name in ["results.json", "diagnostics.json", "learner_weights.csv", "manifest.toml"] {
        assert!(out.join(name).exists(), "{name} missing");
    }
}

#[test]
fn reruns_are_byte_identical() {
    let f = fixture(false);
    let (a, b) = (f.dir.path().join("a"), f.dir.path().join("b"));
    let args = ["--estimand", "psi2g", "--k", "3", "--v", "3", "--seed", "7"];
    assert!(run_estimate(&f, &a, &args).status.success());
    assert!(run_estimate(&f, &b, &args).status.success());
    for name in ["results.csv", "results.json", "learner_weights.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name} differs");
    }
}

#[test]
fn reference_category_is_exactly_zero() {
    let f = fixture(false);
    let out = f.dir.path().join("ref");
    let o = run_estimate(&f, &out, &["--estimand", "psi2g", "--center", "ref:c2", "--k", "3", "--v", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = rows(&out);
    assert_eq!(r[1].category, "c2");
    assert_eq!(r[1].estimate, 0.0);
    assert_eq!(r[1].se, 0.0);
    assert!(r[0].estimate != 0.0);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let f = fixture(false);
    let cfg = f.dir.path().join("run.toml");
    fs::write(
        &cfg,
        format!(
            "[data]\ncounts = {:?}\nmeta = {:?}\nexposure = \"exposure\"\n[estimate]\nestimand = \"psi1\"\n",
            f.counts.display().to_string(),
            f.meta.display().to_string()
        ),
    )
    .unwrap();
    let out = f.dir.path().join("cfg");
    let o = folddiff(&[
        "estimate",
        "--config",
        cfg.to_str().unwrap(),
        "--estimand",
        "psi1g",
        "--center",
        "mean",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc: serde_json::Value = serde_json::from_slice(&fs::read(out.join("results.json")).unwrap()).unwrap();
    assert_eq!(doc["estimand"], "psi1g");
    let manifest = fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert!(manifest.contains("estimand = \"psi1g\""));
}

#[test]
fn validate_reports_flags_and_exits_zero() {
    let f = fixture(true);
    let mut args = vec!["validate".to_string()];
    args.extend(data_args(&f));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = folddiff(&refs);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let line = text.lines().find(|l| l.starts_with("c3\t")).unwrap();
    assert!(line.contains("all_zero_in_arm0"), "{line}");
    assert!(text.contains("1 of 4 categories flagged"));
}

#[test]
fn non_estimable_category_is_flagged_in_results() {
    let f = fixture(true);
    let out = f.dir.path().join("flagged");
    let o = run_estimate(&f, &out, &["--estimand", "psi1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = rows(&out);
    assert!(!r[2].estimable);
    assert!(r[2].estimate.is_nan());
    assert!(r[2].flags.contains("all zero in arm 0"), "{}", r[2].flags);
    assert!(r[0].estimable && r[0].estimate.is_finite());
}

#[test]
fn exit_codes() {
    let f = fixture(false);
    // usage and configuration errors
    assert_eq!(folddiff(&["estimate", "--bogus"]).status.code(), Some(1));
    assert_eq!(folddiff(&["estimate", "--exposure", "exposure"]).status.code(), Some(1));
    let o = run_estimate(&f, &f.dir.path().join("x"), &["--estimand", "psi1", "--method", "tmle"]);
    assert_eq!(o.status.code(), Some(1));
    // data errors
    let bad = f.dir.path().join("bad_meta.csv");
    let meta = fs::read_to_string(&f.meta).unwrap();
    let mut lines: Vec<String> = meta.lines().map(str::to_string).collect();
    let header: Vec<&str> = lines[0].split(',').collect();
    let ei = header.iter().position(|h| *h == "exposure").unwrap();
    let mut cells: Vec<String> = lines[1].split(',').map(str::to_string).collect();
    cells[ei] = "2".into();
    lines[1] = cells.join(",");
    fs::write(&bad, lines.join("\n")).unwrap();
    let o = folddiff(&[
        "validate",
        "--counts",
        f.counts.to_str().unwrap(),
        "--meta",
        bad.to_str().unwrap(),
        "--exposure",
        "exposure",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not binary"));
    let o = folddiff(&["validate", "--counts", "/nonexistent.csv", "--meta", "/nonexistent.csv", "--exposure", "e"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(folddiff(&["--help"]).status.code(), Some(0));
}

#[test]
fn small_simulation_writes_tables() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("sim");
    let o = folddiff(&[
        "simulate",
        "--n",
        "80",
        "--j",
        "3",
        "--reps",
        "2",
        "--methods",
        "psi1_plugin",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["sim_summary.csv", "plot_data.csv", "replicates.csv", "sim_report.json", "manifest.toml"] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    let summary = fs::read_to_string(out.join("sim_summary.csv")).unwrap();
    assert!(summary.contains("psi1_plugin") && summary.contains("zero"));
}
