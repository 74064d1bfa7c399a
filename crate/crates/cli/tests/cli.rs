use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn carpetlab(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_carpetlab"));
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("CARPETLAB_THREADS", t),
        None => cmd.env_remove("CARPETLAB_THREADS"),
    };
    cmd.output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = carpetlab(args, None);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

fn read_theta(dir: &Path) -> Vec<f64> {
    let text = fs::read_to_string(dir.join("theta.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("m,theta_m"));
    lines
        .enumerate()
        .map(|(m, l)| {
            let (a, b) = l.split_once(',').unwrap();
            assert_eq!(a.parse::<usize>().unwrap(), m);
            b.parse().unwrap()
        })
        .collect()
}

/// θ_0 = 1, θ_m = P[Bin(N², pθ_{m−1}) ≥ N² − 1].
fn theta_oracle(n: u32, p: f64, m: usize) -> Vec<f64> {
    let k = (n * n) as i32;
    let mut v = vec![1.0];
    for _ in 0..m {
        let x = *v.last().unwrap();
        let q = p * x;
        v.push(q.powi(k) + k as f64 * q.powi(k - 1) * (1.0 - q));
    }
    v
}

#[test]
fn theta_above_threshold_stays_above_two_thirds() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["theta", "--N", "6", "--p", "0.9997", "--M", "50", "--out", path(dir.path())]);
    let got = read_theta(dir.path());
    let want = theta_oracle(6, 0.9997, 50);
    assert_eq!(got.len(), 51);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        assert!(*g >= 2.0 / 3.0);
    }
}

#[test]
fn theta_at_p_0999_collapses_for_n6() {
    // p0(6) is about 0.99960, so 0.999 lies below the threshold
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["theta", "--N", "6", "--p", "0.999", "--M", "50", "--threshold", "--out", path(dir.path())]);
    let got = read_theta(dir.path());
    let want = theta_oracle(6, 0.999, 50);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
    }
    assert!(got[50] < 2.0 / 3.0);
    let t: Value = serde_json::from_slice(&fs::read(dir.path().join("threshold.json")).unwrap()).unwrap();
    let p0 = t["p"].as_f64().unwrap();
    assert!(p0 > 0.999 && p0 < 0.9997, "p0(6) = {p0}");
}

#[test]
fn percolate_full_retention_has_unit_area() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["percolate", "--N", "3", "--p", "1", "--depth", "4", "--checked", "--out", path(dir.path())]);
    let text = fs::read_to_string(dir.path().join("stats.csv")).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 5);
    for (n, r) in rows.iter().enumerate() {
        assert_eq!(r[4], n.to_string());
        assert_eq!(r[5], 9u64.pow(n as u32).to_string());
        assert_eq!(r[6], "0");
        assert_eq!(r[7], "1/1");
    }
}

fn assert_manifest_covers(dir: &Path) {
    let m = manifest(dir);
    assert_eq!(m["artifact_version"], 1);
    let listed: Vec<String> = m["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| {
            let file = o["file"].as_str().unwrap();
            let bytes = fs::read(dir.join(file)).unwrap();
            let hex: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
            assert_eq!(o["sha256"].as_str().unwrap(), hex, "{file}");
            assert_eq!(o["bytes"].as_u64().unwrap(), bytes.len() as u64);
            file.to_string()
        })
        .collect();
    for entry in fs::read_dir(dir).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        assert!(name == "manifest.json" || listed.contains(&name), "{name} not in manifest");
    }
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let root = tempfile::tempdir().unwrap();
    let runs: Vec<Vec<&str>> = vec![
        vec!["percolate", "--N", "4", "--p", "0.8", "--depth", "3", "--trials", "3", "--clusters"],
        vec!["carpet", "--p", "0.9995", "--depth", "2", "--samples", "2", "--render", "--size", "64"],
        vec!["theta", "--N", "2", "--p", "0.95", "--M", "10", "--mc-trials", "200", "--mc-max-m", "2"],
        vec!["paths", "--N", "8", "--max-len", "2"],
        vec!["gff", "--mode", "covariance", "--grid", "8", "--trials", "300"],
        vec!["gff", "--mode", "markov", "--grid", "12", "--radius", "3", "--trials", "300"],
        vec!["sle", "--kappa", "2,6", "--dt", "0.01", "--trials", "3", "--format", "bin"],
    ];
    for (i, args) in runs.iter().enumerate() {
        let first = root.path().join(format!("a{i}"));
        let second = root.path().join(format!("b{i}"));
        let mut full = args.clone();
        full.extend(["--seed", "11", "--out", path(&first)]);
        let out = carpetlab(&full, Some("1"));
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert_manifest_covers(&first);
        let manifest_path = first.join("manifest.json");
        let out = carpetlab(&["rerun", "--manifest", path(&manifest_path), "--out", path(&second)], Some("3"));
        assert!(out.status.success(), "rerun {args:?}: {}", String::from_utf8_lossy(&out.stderr));
        for o in manifest(&first)["outputs"].as_array().unwrap() {
            let f = o["file"].as_str().unwrap();
            assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{args:?} {f}");
        }
    }
}

#[test]
fn rerun_reports_digest_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    run_ok(&["percolate", "--N", "3", "--p", "0.7", "--depth", "2", "--out", path(&a)]);
    let mut m = manifest(&a);
    m["outputs"][0]["sha256"] = Value::String("0".repeat(64));
    let tampered = dir.path().join("tampered.json");
    fs::write(&tampered, serde_json::to_vec(&m).unwrap()).unwrap();
    let out = carpetlab(
        &["rerun", "--manifest", path(&tampered), "--out", path(&dir.path().join("b"))],
        None,
    );
    assert_eq!(out.status.code(), Some(3));
    let rep: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rep["invariants"][0], "rerun-byte-identical");
}

#[test]
fn run_from_config_file_matches_flags() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("flags");
    run_ok(&["theta", "--N", "3", "--p", "0.97", "--M", "20", "--seed", "5", "--out", path(&a)]);
    let cfg = serde_json::json!({
        "version": 1,
        "seed": 5,
        "out": dir.path().join("file"),
        "command": {"subcommand": "theta", "N": 3, "p": 0.97, "M": 20}
    });
    let cfg_path = dir.path().join("config.json");
    fs::write(&cfg_path, serde_json::to_vec(&cfg).unwrap()).unwrap();
    run_ok(&["run", "--config", path(&cfg_path)]);
    assert_eq!(
        fs::read(a.join("theta.csv")).unwrap(),
        fs::read(dir.path().join("file/theta.csv")).unwrap()
    );
    let mut left = manifest(&a)["config"].clone();
    let mut right = manifest(&dir.path().join("file"))["config"].clone();
    left["out"] = Value::Null;
    right["out"] = Value::Null;
    assert_eq!(left, right);
}

#[test]
fn validation_lists_every_offending_field() {
    let out = carpetlab(&["percolate", "--N", "1", "--p", "1.5", "--depth", "99", "--trials", "0"], None);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for field in ["N:", "p:", "depth:", "trials:"] {
        assert!(err.contains(field), "missing {field} in {err}");
    }
    let out = carpetlab(&["carpet", "--N", "4", "--p", "0.99", "--depth", "2"], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("N >= 6"));
}

#[test]
fn bad_thread_count_is_a_validation_error() {
    let out = carpetlab(&["theta", "--N", "2", "--p", "0.9"], Some("zero"));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn enumeration_budget_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = carpetlab(
        &["paths", "--N", "8", "--max-len", "4", "--budget", "10", "--out", path(dir.path())],
        None,
    );
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("enumeration-budget-exceeded"));
}

#[test]
fn checked_mode_reports_violated_invariant() {
    let dir = tempfile::tempdir().unwrap();
    // a 7-site horizontal run has diameter 9 > 0.3·20
    let labels = dir.path().join("labels.json");
    fs::write(&labels, r#"{"r": 20, "rows": [[0, -3, 7]]}"#).unwrap();
    let out_dir = dir.path().join("out");
    let args = [
        "gff", "--mode", "harness", "--labels", path(&labels), "--iota", "0.3", "--out", path(&out_dir),
    ];
    let unchecked = carpetlab(&args, None);
    assert!(unchecked.status.success());
    let mut checked_args = args.to_vec();
    checked_args.push("--checked");
    let out = carpetlab(&checked_args, None);
    assert_eq!(out.status.code(), Some(3));
    let rep: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rep["invariants"][0], "bad-component-diameter");
    assert!(out_dir.join("violations.json").exists());
    // the label field is embedded, so the manifest replays without the file
    fs::remove_file(&labels).unwrap();
    let m = out_dir.join("manifest.json");
    let rerun = carpetlab(&["rerun", "--manifest", path(&m), "--out", path(&dir.path().join("again"))], None);
    assert_eq!(rerun.status.code(), Some(0), "{}", String::from_utf8_lossy(&rerun.stderr));
}

#[test]
fn checked_carpet_passes_whyburn_checks() {
    let dir = tempfile::tempdir().unwrap();
    let out = carpetlab(
        &["carpet", "--p", "0.9995", "--depth", "2", "--samples", "3", "--checked", "--out", path(dir.path())],
        None,
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let reports: Value = serde_json::from_slice(&fs::read(dir.path().join("whyburn.json")).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 3);
    assert!(reports.as_array().unwrap().iter().all(|r| r["report"]["pass"] == true));
}

#[test]
fn render_round_trip_and_unknown_kind() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("c");
    run_ok(&["carpet", "--p", "0.9995", "--depth", "2", "--out", path(&c)]);
    let input = c.join("carpet.json");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok(&["render", "--input", path(&input), "--style", "png", "--size", "96", "--out", path(&a)]);
    run_ok(&["render", "--input", path(&input), "--style", "png", "--size", "96", "--out", path(&b)]);
    let png = fs::read(a.join("render.png")).unwrap();
    assert_eq!(&png[1..4], b"PNG");
    assert_eq!(png, fs::read(b.join("render.png")).unwrap());
    run_ok(&["render", "--input", path(&input), "--style", "svg", "--out", path(&a)]);
    assert!(fs::read_to_string(a.join("render.svg")).unwrap().starts_with("<svg"));

    let bogus = dir.path().join("bogus.json");
    fs::write(&bogus, r#"{"kind": "histogram"}"#).unwrap();
    let out = carpetlab(&["render", "--input", path(&bogus), "--out", path(&a)], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unrenderable"));
}

#[test]
fn rerun_refuses_changed_render_input() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("trace.json");
    let pts: Vec<[f64; 2]> = vec![[0.0, 0.0], [0.1, 0.5], [0.2, 0.9]];
    let doc = serde_json::json!({"kind": "trace", "kappa": 3.0, "t_max": 1.0, "dt": 0.5, "seed": 0, "points": pts});
    fs::write(&input, serde_json::to_vec(&doc).unwrap()).unwrap();
    let r = dir.path().join("r");
    run_ok(&["render", "--input", path(&input), "--out", path(&r)]);
    fs::write(&input, serde_json::to_vec(&serde_json::json!({"kind": "trace", "kappa": 3.0, "t_max": 1.0, "dt": 0.5, "seed": 0, "points": [[0.0, 0.0]]})).unwrap()).unwrap();
    let out = carpetlab(
        &["rerun", "--manifest", path(&r.join("manifest.json")), "--out", path(&dir.path().join("r2"))],
        None,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sha256"));
}
