use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_prefix-moe"))
}

fn example(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn binary")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn equiv_default_passes_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = example("equiv.json");
    let o = run(&["equiv", "--config", cfg.to_str().unwrap(), "--output-dir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&dir.path().join("equiv.json"));
    assert_eq!(report["trials"], 100);
    assert!(report["max_prefix_diff"].as_f64().unwrap() <= 1e-9);
    let manifest = json(&dir.path().join("equiv.manifest.json"));
    assert_eq!(manifest["command"], "equiv");
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn equiv_zero_tolerance_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"version": 1, "trials": 20, "tolerance": 0.0, "seed": 3}"#);
    let o = run(&["equiv", "--config", &cfg, "--output-dir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn equiv_without_trials_is_an_empty_success() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"version": 1, "trials": 0}"#);
    let o = run(&["equiv", "--config", &cfg, "--output-dir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(json(&dir.path().join("equiv.json"))["trials"], 0);
}

#[test]
fn dry_run_prints_plan_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = example("theorem42.json");
    let o = run(&["sweep", "--config", cfg.to_str().unwrap(), "--output-dir", out.to_str().unwrap(), "--dry-run"]);
    assert_eq!(code(&o), 0);
    let plan: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(plan[0]["cells"].as_array().unwrap().len(), 5 * 20);
    assert!(!out.exists());
}

#[test]
fn seed_override_changes_the_plan() {
    let cfg = example("theorem42.json");
    let plan = |seed: &str| {
        let o = run(&["sweep", "--config", cfg.to_str().unwrap(), "--dry-run", "--seed", seed]);
        serde_json::from_slice::<serde_json::Value>(&o.stdout).unwrap()
    };
    assert_ne!(plan("1")[0]["cells"][0], plan("2")[0]["cells"][0]);
}

#[test]
fn refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"version": 1, "trials": 2}"#);
    let d = dir.path().to_str().unwrap();
    assert_eq!(code(&run(&["equiv", "--config", &cfg, "--output-dir", d])), 0);
    let o = run(&["equiv", "--config", &cfg, "--output-dir", d]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));
    assert_eq!(code(&run(&["equiv", "--config", &cfg, "--output-dir", d, "--force"])), 0);
}

fn gen_small(dir: &Path, noise: f64) {
    let model = format!(
        r#"{{"bank": {{"form": "linear", "experts": [{{"gate_matrix": [[0, 0], [0, 0]], "gate_bias": 0, "weights": [1, -1]}}]}},
            "projection": {{"b": [[1, 0], [0, 1]], "c": [1, 0.5]}},
            "measure": {{"setting": "linear_shared", "atoms": [{{"b": 0, "p": [1, -0.5]}}, {{"b": 0.2, "p": [-0.7, 0.8]}}]}},
            "noise_sd": {noise}}}"#
    );
    let cfg = write(dir, "gen_config.json", &format!(r#"{{"version": 1, "model": {model}, "n": 200, "seed": 9}}"#));
    let o = run(&["gen", "--config", &cfg, "--output-dir", dir.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.join("data.meta.json").exists());
}

#[test]
fn noiseless_oracle_fit_recovers_the_truth() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path(), 0.0);
    let cfg = write(
        dir.path(),
        "fit_config.json",
        r#"{"version": 1, "fit": {"setting": "linear_shared", "atoms": 2, "init": {"kind": "oracle_perturb", "scale": 0.0}}}"#,
    );
    let o = run(&["fit", "--config", &cfg, "--output-dir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&dir.path().join("fit.json"));
    assert!(report["voronoi_loss"].as_f64().unwrap() <= 1e-8);
    assert!(report["result"]["final_objective"].as_f64().unwrap() <= 1e-8);
}

#[test]
fn fit_refuses_a_setting_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path(), 0.1);
    let cfg = write(
        dir.path(),
        "fit_config.json",
        r#"{"version": 1, "fit": {"setting": "non_shared", "atoms": 2, "init": {"kind": "multistart", "restarts": 1}}}"#,
    );
    let o = run(&["fit", "--config", &cfg, "--output-dir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(!dir.path().join("fit.json").exists());
}

#[test]
fn fit_gradient_check_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path(), 0.1);
    let cfg = write(
        dir.path(),
        "fit_config.json",
        r#"{"version": 1, "fit": {"setting": "linear_shared", "atoms": 3, "init": {"kind": "multistart", "restarts": 2},
            "optimizer": {"max_iters": 300}}}"#,
    );
    let o = run(&["fit", "--config", &cfg, "--output-dir", dir.path().to_str().unwrap(), "--grad-check"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let g = &json(&dir.path().join("fit.json"))["gradient_check"];
    assert!(g["max_rel_error"].as_f64().unwrap() <= 1e-5);
    assert_eq!(g["passed"], true);
}

#[test]
fn witness_rejects_order_zero() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(example("witness.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["r"] = 0.into();
    let cfg = write(dir.path(), "w.json", &v.to_string());
    let o = run(&["witness", "--config", &cfg, "--output-dir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bad_configs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    for (name, text) in [
        ("syntax.json", "{\"version\": 1,"),
        ("unknown.json", r#"{"version": 1, "trails": 3}"#),
        ("version.json", r#"{"version": 9}"#),
    ] {
        let cfg = write(dir.path(), name, text);
        let o = run(&["equiv", "--config", &cfg, "--output-dir", d]);
        assert_eq!(code(&o), 2, "{name}");
    }
    assert_eq!(code(&run(&["equiv", "--config", "/nonexistent.json"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
}
