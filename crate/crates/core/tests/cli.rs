use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use heat_kernel::cli::{parse_csv_table, toy1d, ExperimentConfig, RunManifest, MANIFEST_FILE};
use serde_json::Value;
use tempfile::TempDir;

fn hk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hk"))
        .args(args)
        .env("HK_THREADS", "1")
        .output()
        .expect("hk binary runs")
}

fn write_config(dir: &Path, json: &str) -> String {
    let p = dir.join("config.json");
    fs::write(&p, json).unwrap();
    p.to_string_lossy().into_owned()
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap()).unwrap()
}

/// Metric JSON with every `wallclock_s` field removed.
fn metrics_without_timing(path: &Path) -> Value {
    fn strip(v: &mut Value) {
        match v {
            Value::Object(m) => {
                m.remove("wallclock_s");
                m.values_mut().for_each(strip);
            }
            Value::Array(a) => a.iter_mut().for_each(strip),
            _ => {}
        }
    }
    let mut v: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    strip(&mut v);
    v
}

const SMALL_SVGD: &str = r#"{"svgd_gauss": {"svgd": {"iterations": 30}}}"#;

#[test]
fn repeated_seed_gives_identical_artifacts() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL_SVGD);
    let dirs = [tmp.path().join("a"), tmp.path().join("b")];
    for d in &dirs {
        let out = hk(&["svgd-gauss", "--config", &cfg, "--seed", "4", "--out", d.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let files = manifest(&dirs[0]).files;
    assert!(files.iter().any(|f| f == "particles_hk-svgd.csv"));
    for f in files {
        let (a, b) = (dirs[0].join(&f), dirs[1].join(&f));
        if f.ends_with(".json") {
            assert_eq!(metrics_without_timing(&a), metrics_without_timing(&b), "{f}");
        } else {
            assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap(), "{f}");
        }
    }
}

#[test]
fn manifest_lists_only_existing_files() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL_SVGD);
    let out_dir = tmp.path().join("run");
    let out = hk(&["svgd-gauss", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success());
    let m = manifest(&out_dir);
    assert_eq!(m.experiment, "svgd-gauss");
    assert!(m.error.is_none());
    assert_eq!(m.config.svgd_gauss.svgd.iterations, 30);
    assert!(!m.files.is_empty());
    for f in &m.files {
        assert!(out_dir.join(f).is_file(), "{f} missing");
    }
}

#[test]
fn missing_dataset_exits_with_code_two_and_names_the_path() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("no-such-data.csv");
    let json = format!(
        r#"{{"svgd_bnn": {{"dataset": {{"kind": "csv", "path": {}}}}}}}"#,
        serde_json::to_string(&missing).unwrap()
    );
    let cfg = write_config(tmp.path(), &json);
    let out_dir = tmp.path().join("run");
    let out = hk(&["svgd-bnn", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("no-such-data.csv"), "{stderr}");
    assert!(manifest(&out_dir).error.unwrap().contains("no-such-data.csv"));
}

#[test]
fn configuration_problems_exit_with_code_two() {
    let tmp = TempDir::new().unwrap();
    let out_dir = tmp.path().join("run");
    let out = out_dir.to_str().unwrap();

    let bad_json = write_config(tmp.path(), "{ not json");
    assert_eq!(hk(&["toy1d", "--config", &bad_json, "--out", out]).status.code(), Some(2));

    let wrong = write_config(tmp.path(), r#"{"experiment": "gan2d"}"#);
    assert_eq!(hk(&["toy1d", "--config", &wrong, "--out", out]).status.code(), Some(2));

    let invalid = write_config(tmp.path(), r#"{"svgd_gauss": {"particles": 0}}"#);
    assert_eq!(hk(&["svgd-gauss", "--config", &invalid, "--out", out]).status.code(), Some(2));

    let absent = tmp.path().join("absent.json");
    assert_eq!(
        hk(&["toy1d", "--config", absent.to_str().unwrap(), "--out", out]).status.code(),
        Some(2)
    );
}

#[test]
fn toy_checkpoints_round_trip_through_csv() {
    let tmp = TempDir::new().unwrap();
    let json = r#"{"toy1d": {"points": 64, "iterations": 5, "checkpoints": [1, 5], "grid_step": 0.5}}"#;
    let cfg_path = write_config(tmp.path(), json);
    let out_dir = tmp.path().join("run");
    let out = hk(&["toy1d", "--config", &cfg_path, "--seed", "2", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let cfg = ExperimentConfig::from_json(json).unwrap();
    let expected = toy1d(&cfg.toy1d, 2).unwrap();
    for c in &expected.checkpoints {
        let text = fs::read_to_string(out_dir.join(format!("toy1d_iter{:03}.csv", c.iteration))).unwrap();
        let (header, rows) = parse_csv_table(&text).unwrap();
        assert_eq!(header, vec!["x", "learned", "oracle"]);
        assert_eq!(rows.len(), c.grid.len());
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r, &vec![c.grid[i], c.learned[i], c.oracle[i]]);
        }
    }
    let (_, l2) = parse_csv_table(&fs::read_to_string(out_dir.join("toy1d_l2.csv")).unwrap()).unwrap();
    let iterations: Vec<f64> = l2.iter().map(|r| r[0]).collect();
    assert_eq!(iterations, vec![1.0, 5.0]);
    assert_eq!(l2[1][2], expected.checkpoints[1].l2);
}

#[test]
fn several_seeds_write_separate_directories() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL_SVGD);
    let out_dir = tmp.path().join("run");
    let out = hk(&[
        "svgd-gauss", "--config", &cfg, "--seed", "7", "--num-seeds", "2", "--jobs", "2", "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    for s in [7, 8] {
        assert_eq!(manifest(&out_dir.join(format!("seed-{s}"))).seed, s);
    }
}

#[test]
fn validate_prints_a_passing_table() {
    let tmp = TempDir::new().unwrap();
    let out = hk(&["validate", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS"));
    assert!(!stdout.contains("FAIL"), "{stdout}");
    assert!(tmp.path().join("validate.txt").is_file());
}
