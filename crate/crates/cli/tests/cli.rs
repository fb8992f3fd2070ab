use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn focal(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_focal")).args(args).current_dir(dir).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const SYNTH: &str = "num_targets = 60\nsecondary_degree = 4.0\nrare_rate = 0.1\nnoise_std = 0.3\nnum_distractors = 20\n";
const MODEL: &str = "hidden_dim = 8\nout_dim = 8\ncoa_heads = 2\nmax_epoch = 3\nmetapaths = [[\"target-anchor\"]]\n";

fn setup() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("synth.toml"), SYNTH).unwrap();
    fs::write(d.path().join("focal.toml"), MODEL).unwrap();
    let o = focal(&["gen", "--config", "synth.toml", "--out", "g.graph", "--seed", "7"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    d
}

#[test]
fn gen_is_deterministic_and_writes_manifest() {
    let d = setup();
    let first = fs::read(d.path().join("g.graph")).unwrap();
    let o = focal(&["gen", "--config", "synth.toml", "--out", "h.graph", "--seed", "7"], d.path());
    assert_eq!(code(&o), 0);
    assert_eq!(first, fs::read(d.path().join("h.graph")).unwrap());
    let manifest = fs::read_to_string(d.path().join("g.graph.manifest.toml")).unwrap();
    assert!(manifest.contains("seeds = [7]"));
    assert!(manifest.contains("config_hash"));
}

#[test]
fn missing_seed_and_unknown_flag_are_usage_errors() {
    let d = setup();
    let o = focal(&["gen", "--out", "x.graph"], d.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--seed"));
    let o = focal(&["gradcheck", "--out", "gc", "--bogus"], d.path());
    assert_eq!(code(&o), 1);
    assert!(!o.stderr.is_empty());
    let o = focal(&["--help"], d.path());
    assert_eq!(code(&o), 0);
}

#[test]
fn bad_config_is_an_input_error() {
    let d = setup();
    fs::write(d.path().join("bad.toml"), "hidden_dims = 3\n").unwrap();
    let o = focal(&["train", "--graph", "g.graph", "--config", "bad.toml", "--seed", "0", "--out", "run"], d.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("hidden_dims"));
}

#[test]
fn train_then_eval() {
    let d = setup();
    let o = focal(&["train", "--graph", "g.graph", "--config", "focal.toml", "--seed", "0", "--out", "run"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["params.json", "report.json", "test_metrics.txt", "curve.txt", "summary.txt", "manifest.toml", "config.toml"] {
        assert!(d.path().join("run").join(f).exists(), "{f}");
    }
    let o = focal(
        &["eval", "--graph", "g.graph", "--config", "focal.toml", "--params", "run/params.json", "--split", "test", "--out", "ev"],
        d.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    // Evaluation of the restored parameters reproduces the training report.
    assert_eq!(
        fs::read_to_string(d.path().join("ev/metrics.txt")).unwrap(),
        fs::read_to_string(d.path().join("run/test_metrics.txt")).unwrap()
    );
}

#[test]
fn multi_seed_training_reports_mean_and_std() {
    let d = setup();
    let o = focal(&["train", "--graph", "g.graph", "--config", "focal.toml", "--seed", "3", "--runs", "2", "--out", "multi"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.path().join("multi/seed-3/params.json").exists());
    assert!(d.path().join("multi/seed-4/params.json").exists());
    let s = fs::read_to_string(d.path().join("multi/summary.txt")).unwrap();
    assert!(s.contains("runs = 2") && s.contains("micro_f1 = ") && s.contains('±'));
}

#[test]
fn same_seed_reruns_are_identical() {
    let d = setup();
    for out in ["a", "b"] {
        let o = focal(&["train", "--graph", "g.graph", "--config", "focal.toml", "--seed", "1", "--out", out], d.path());
        assert_eq!(code(&o), 0);
    }
    let read = |p: &str| fs::read_to_string(d.path().join(p)).unwrap();
    assert_eq!(read("a/params.json"), read("b/params.json"));
    assert_eq!(read("a/test_metrics.txt"), read("b/test_metrics.txt"));
}

#[test]
fn divergence_exits_with_numerical_code() {
    let d = setup();
    fs::write(d.path().join("hot.toml"), format!("{MODEL}lr = 1e300\n")).unwrap();
    let o = focal(&["train", "--graph", "g.graph", "--config", "hot.toml", "--seed", "0", "--out", "hot"], d.path());
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn verify_single_check_and_unknown_suite() {
    let d = setup();
    let o = focal(&["verify-theorems", "--suite", "loss_floor", "--seed", "0", "--strict", "--out", "th"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.path().join("th/loss_floor.txt").exists());
    assert!(d.path().join("th/summary.txt").exists());
    let o = focal(&["verify-theorems", "--suite", "nope", "--seed", "0", "--out", "th2"], d.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn verify_all_strict_writes_seven_reports() {
    let d = setup();
    let o = focal(&["verify-theorems", "--suite", "all", "--seed", "0", "--strict", "--out", "all"], d.path());
    assert_eq!(code(&o), 0, "{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    let reports = fs::read_dir(d.path().join("all"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "json"))
        .count();
    assert_eq!(reports, 7);
    assert!(fs::read_dir(d.path().join("all/curves")).unwrap().count() > 0);
}

#[test]
fn gradcheck_and_ablate() {
    let d = setup();
    let o = focal(&["gradcheck", "--seed", "1", "--points", "2", "--out", "gc"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(d.path().join("gc/gradcheck.txt")).unwrap().lines().count(), 9);
    let o = focal(&["ablate", "--graph", "g.graph", "--config", "focal.toml", "--seed", "0", "--runs", "2", "--out", "ab"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(d.path().join("ab/ablation.txt")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.starts_with("full"));
}

#[test]
fn thread_cap_must_be_positive() {
    let d = setup();
    let o = Command::new(env!("CARGO_BIN_EXE_focal"))
        .args(["gradcheck", "--points", "1", "--out", "gc"])
        .env("FOCAL_THREADS", "0")
        .current_dir(d.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}
