use std::path::Path;
use std::process::{Command, Output};

const TOY: &str = r#"{
  "experiment": "regression",
  "master_seed": 1,
  "regression": {
    "dataset": { "inline": { "features": [[1.0], [1.0]], "targets": [0.0, 2.0] } },
    "w0": [0.0],
    "schedule": { "kind": "constant", "scale": 0.5 },
    "batch_sizes": [1, 2],
    "t_max": 2,
    "runs": 500,
    "bootstrap_resamples": 200
  }
}"#;

fn batchvar(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_batchvar"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn batchvar")
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn toy_regression_run() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("toy.json"), TOY).unwrap();
    let out = batchvar(&["run", "toy.json", "--output-dir", "out"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("out");

    let exact = read(&dir, "regression_variance.csv");
    let mut lines = exact.lines();
    assert_eq!(lines.next(), Some("t,b,var_g,var_full_grad"));
    assert_eq!(lines.next().unwrap().split(',').take(3).collect::<Vec<_>>(), ["0", "1", "1.0000000000000000e0"]);
    // full batch is deterministic
    assert!(exact.lines().filter(|l| l.split(',').nth(1) == Some("2")).all(|l| l.contains(",0.0000000000000000e0,")));

    for f in ["fig1a.csv", "fig1b.csv", "monotonicity.csv", "mc_variance.csv", "polyfit.json", "manifest.json"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    let manifest: serde_json::Value = serde_json::from_str(&read(&dir, "manifest.json")).unwrap();
    assert_eq!(manifest["master_seed"], 1);
    assert_eq!(manifest["all_passed"], true);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("[PASS] exact_variances_non_increasing_in_b"), "{stdout}");
}

#[test]
fn batch_size_above_n_is_rejected_with_location() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.json"), TOY.replace("[1, 2]", "[1, 3]")).unwrap();
    for cmd in ["validate", "run"] {
        let out = batchvar(&[cmd, "bad.json"], tmp.path());
        assert!(!out.status.success());
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("bad.json:8") && err.contains("regression.batch_sizes"), "{err}");
    }
    assert!(!tmp.path().join("output").exists());
}

#[test]
fn malformed_json_reports_line() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("broken.json"), "{\n  \"experiment\": \"regression\",\n  oops\n}").unwrap();
    let out = batchvar(&["validate", "broken.json"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn moments_experiment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = r#"{ "experiment": "moments", "master_seed": 5,
        "moments": { "dim": 2, "samples": 50000, "patterns": [[0, 0, 0, 0], [0, 1, 1, 0], [0, 0, 0, 1]] } }"#;
    std::fs::write(tmp.path().join("m.json"), cfg).unwrap();
    let out = batchvar(&["run", "m.json", "--output-dir", "mo"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let csv = read(&tmp.path().join("mo"), "moments.csv");
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().nth(3).unwrap().starts_with("0 0 0 1,2,false,0,"));
}

#[test]
fn reruns_and_thread_counts_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("toy.json"), TOY).unwrap();
    let mut snapshots = Vec::new();
    for threads in ["1", "2", "1"] {
        let _ = std::fs::remove_dir_all(tmp.path().join("o"));
        let out = batchvar(&["run", "toy.json", "--output-dir", "o", "--threads", threads], tmp.path());
        assert!(out.status.success());
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(tmp.path().join("o"))
            .unwrap()
            .map(|e| e.unwrap())
            .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
            .collect();
        files.sort();
        snapshots.push(files);
    }
    assert_eq!(snapshots[0], snapshots[1]);
    assert_eq!(snapshots[0], snapshots[2]);
}

#[test]
fn seed_override_changes_monte_carlo_only() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("toy.json"), TOY).unwrap();
    assert!(batchvar(&["run", "toy.json", "--output-dir", "a"], tmp.path()).status.success());
    assert!(batchvar(&["run", "toy.json", "--output-dir", "b", "--seed", "2"], tmp.path()).status.success());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(read(&a, "regression_variance.csv"), read(&b, "regression_variance.csv"));
    assert_ne!(read(&a, "mc_variance.csv"), read(&b, "mc_variance.csv"));
}

#[test]
fn selfcheck_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = batchvar(&["selfcheck"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
}
