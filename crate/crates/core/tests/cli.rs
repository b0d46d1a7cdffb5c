use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dpss::io::{read_json, read_release, to_json_string};
use dpss::privacy::{calibrate_agm, PrivacyBudget};
use dpss::special::normal_quantile;
use serde_json::Value;
use tempfile::TempDir;

fn dpss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpss"))
        .args(args)
        .env_remove("DPSS_THREADS")
        .output()
        .expect("binary runs")
}

fn dpss_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpss"))
        .current_dir(dir)
        .args(args)
        .env_remove("DPSS_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    if text.trim().is_empty() {
        Value::Null
    } else {
        serde_json::from_str(&text).unwrap()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn gaussian_model(dir: &Path, b: f64) -> PathBuf {
    write(dir, "model.json", &format!(r#"{{"model_id":"gaussian_mean","d":1,"clip":{{"B":{b:?}}}}}"#))
}

/// Release JSON for a gaussian mean with the given noise scale at
/// `ε = 1, δ = 1e-6`; `B` is chosen so that the calibration reproduces `sigma`.
fn gaussian_release(dir: &Path, s_tilde: f64, n: usize, sigma: f64) -> (PathBuf, PathBuf) {
    let unit = calibrate_agm(1.0, &PrivacyBudget::new(1.0, 1e-6).unwrap());
    let b = sigma * n as f64 / (2.0 * unit);
    let sigma = calibrate_agm(2.0 * b / n as f64, &PrivacyBudget::new(1.0, 1e-6).unwrap());
    let rel = serde_json::json!({
        "model_id": "gaussian_mean", "d": 1, "n": n, "B": b,
        "epsilon": 1.0, "delta": 1e-6, "sigma": sigma, "s_tilde": [s_tilde]
    });
    (write(dir, "rel.json", &rel.to_string()), gaussian_model(dir, b))
}

#[test]
fn calibrate_scales_with_sensitivity() {
    let unit = ok(&dpss(&["calibrate", "--sensitivity", "1", "--epsilon", "1", "--delta", "1e-6"]));
    let sigma = unit["sigma"].as_f64().unwrap();
    assert!((sigma - 4.224678889326835).abs() < 1e-9 * sigma);
    assert!(unit["achieved_delta"].as_f64().unwrap() <= 1e-6);

    let small = ok(&dpss(&["calibrate", "--sensitivity", "0.006", "--epsilon", "1", "--delta", "1e-6"]));
    let s = small["sigma"].as_f64().unwrap();
    assert!((s - 0.006 * sigma).abs() < 1e-9 * s);

    let bad = dpss(&["calibrate", "--sensitivity", "1", "--epsilon", "-1", "--delta", "1e-6"]);
    assert_eq!(code(&bad), 2);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("invalid_budget"));
}

#[test]
fn release_with_zero_noise_hook() {
    let dir = TempDir::new().unwrap();
    let data = write(dir.path(), "data.csv", "0.2\n-0.2\n");
    let model = gaussian_model(dir.path(), 5.0);
    let out = dir.path().join("rel.json");
    let res = dpss(&["release", "--data", p(&data), "--model", p(&model), "--epsilon", "inf", "--seed", "1", "--out", p(&out)]);
    ok(&res);
    let rel = read_release(&out).unwrap();
    assert_eq!(rel.s_tilde, vec![0.0]);
    assert_eq!(rel.sigma, 0.0);
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("n=2") && stderr.contains("sigma="));
}

#[test]
fn release_auto_delta_and_reproducibility() {
    let dir = TempDir::new().unwrap();
    let rows: String = (0..1000).map(|i| format!("{}\n", (i as f64 * 0.37).sin())).collect();
    let data = write(dir.path(), "data.csv", &rows);
    let model = gaussian_model(dir.path(), 5.0);
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for out in [&a, &b] {
        ok(&dpss(&["release", "--data", p(&data), "--model", p(&model), "--epsilon", "1", "--delta", "auto", "--seed", "42", "--out", p(out)]));
    }
    let json: Value = read_json(&a).unwrap();
    assert_eq!(json["delta"].as_f64().unwrap(), 1e-6);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn release_rejects_bad_data() {
    let dir = TempDir::new().unwrap();
    let model = gaussian_model(dir.path(), 5.0);
    let out = dir.path().join("rel.json");
    let bad = write(dir.path(), "bad.csv", "0.1,0.2\n");
    let empty = write(dir.path(), "empty.csv", "");
    for data in [&bad, &empty] {
        let res = dpss(&["release", "--data", p(data), "--model", p(&model), "--epsilon", "1", "--seed", "1", "--out", p(&out)]);
        assert_eq!(code(&res), 3);
    }
}

#[test]
fn estimate_gaussian_example() {
    let dir = TempDir::new().unwrap();
    let (rel, model) = gaussian_release(dir.path(), 0.3, 1000, 0.1);
    let rep = ok(&dpss(&["estimate", "--release", p(&rel), "--model", p(&model), "--method", "plugin", "--alpha", "0.05"]));
    let theta = rep["theta_hat"][0].as_f64().unwrap();
    assert!((theta - 0.3).abs() < 1e-12);
    let half = normal_quantile(0.975) * 0.011f64.sqrt();
    let (lo, hi) = (rep["cis"][0][0].as_f64().unwrap(), rep["cis"][0][1].as_f64().unwrap());
    // The Fisher ridge 0.01σ² moves the interval by about 1e-4.
    assert!((lo - (0.3 - half)).abs() < 2e-4 && (hi - (0.3 + half)).abs() < 2e-4, "{lo} {hi}");

    let na = ok(&dpss(&["estimate", "--release", p(&rel), "--model", p(&model), "--method", "noise-aware"]));
    assert!((na["theta_hat"][0].as_f64().unwrap() - theta).abs() < 1e-6);
}

#[test]
fn estimate_rejects_corrupt_release() {
    let dir = TempDir::new().unwrap();
    let model = gaussian_model(dir.path(), 5.0);
    let rel = write(dir.path(), "rel.json", "{\"model_id\": \"gaussian_mean\", \"d\": ");
    assert_eq!(code(&dpss(&["estimate", "--release", p(&rel), "--model", p(&model)])), 3);
}

#[test]
fn estimate_rejects_dimension_mismatch() {
    let dir = TempDir::new().unwrap();
    let (rel, _) = gaussian_release(dir.path(), 0.3, 1000, 0.1);
    let design = write(dir.path(), "x.csv", "1,0\n0,1\n");
    let model = write(
        dir.path(),
        "lg.json",
        r#"{"model_id":"logistic","d":2,"clip":{"B_X":3},"design_csv":"x.csv"}"#,
    );
    assert!(design.exists());
    assert_eq!(code(&dpss(&["estimate", "--release", p(&rel), "--model", p(&model)])), 3);
}

#[test]
fn bootstrap_is_seeded() {
    let dir = TempDir::new().unwrap();
    let (rel, model) = gaussian_release(dir.path(), 0.3, 1000, 0.1);
    let args = ["bootstrap", "--release", p(&rel), "--model", p(&model), "--b-boot", "200", "--seed", "9"];
    let a = dpss(&args);
    let b = dpss(&args);
    ok(&a);
    assert_eq!(a.stdout, b.stdout);
    let rep = ok(&a);
    assert_eq!(rep["method"], "bootstrap");
}

#[test]
fn synth_validates_and_reproduces() {
    let dir = TempDir::new().unwrap();
    let (rel, model) = gaussian_release(dir.path(), 0.3, 1000, 0.1);
    let out = dir.path().join("syn.csv");
    let zero = dpss(&["synth", "--release", p(&rel), "--model", p(&model), "--n-syn", "0", "--seed", "1", "--out", p(&out)]);
    assert_eq!(code(&zero), 2);

    let other = dir.path().join("syn2.csv");
    for o in [&out, &other] {
        ok(&dpss(&["synth", "--release", p(&rel), "--model", p(&model), "--n-syn", "50", "--seed", "3", "--out", p(o)]));
    }
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&other).unwrap());
    let side: Value = read_json(&out.with_extension("json")).unwrap();
    assert_eq!(side["n_syn"], 50);
    assert_eq!(side["model_id"], "gaussian_mean");
}

#[test]
fn synth_large_sample_tracks_estimate() {
    let dir = TempDir::new().unwrap();
    let data = write(dir.path(), "data.csv", "0.5\n0.1\n");
    let model = gaussian_model(dir.path(), 5.0);
    let rel = dir.path().join("rel.json");
    ok(&dpss(&["release", "--data", p(&data), "--model", p(&model), "--epsilon", "inf", "--seed", "1", "--out", p(&rel)]));
    let out = dir.path().join("syn.csv");
    ok(&dpss(&["synth", "--release", p(&rel), "--model", p(&model), "--n-syn", "1000000", "--seed", "4", "--out", p(&out)]));
    let text = std::fs::read_to_string(&out).unwrap();
    let vals: Vec<f64> = text.lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(vals.len(), 1_000_000);
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    assert!((mean - 0.3).abs() < 0.005, "{mean}");
}

#[test]
fn analyze_modes() {
    let dir = TempDir::new().unwrap();
    let (rel, model) = gaussian_release(dir.path(), 0.3, 1000, 0.1);
    let syn = dir.path().join("syn.csv");
    ok(&dpss(&["synth", "--release", p(&rel), "--model", p(&model), "--n-syn", "1000", "--seed", "5", "--out", p(&syn)]));

    // Naive mode never opens the release.
    let missing = dir.path().join("nope.json");
    let naive = ok(&dpss(&["analyze", "--data", p(&syn), "--model", p(&model), "--mode", "naive", "--release", p(&missing)]));
    assert_eq!(naive["method"], "naive_synth");

    let na = ok(&dpss(&["analyze", "--data", p(&syn), "--model", p(&model), "--mode", "noise-aware", "--release", p(&rel)]));
    let release = read_release(&rel).unwrap();
    let info = 1.0 + (0.01 * release.sigma * release.sigma).max(1e-6);
    let expected = 1.0 / (1000.0 * info) + release.sigma.powi(2) / (info * info) + 1.0 / (1000.0 * info);
    assert!((na["variance"][0][0].as_f64().unwrap() - expected).abs() < 1e-15);

    let no_rel = dpss(&["analyze", "--data", p(&syn), "--model", p(&model), "--mode", "noise-aware"]);
    assert_eq!(code(&no_rel), 2);
    let gone = dir.path().join("gone.csv");
    assert_eq!(code(&dpss(&["analyze", "--data", p(&gone), "--model", p(&model), "--mode", "naive"])), 3);
}

#[test]
fn downstream_commands_work_without_raw_data() {
    let raw_dir = TempDir::new().unwrap();
    let rows: String = (0..400).map(|i| format!("{}\n", 1.0 + (i as f64 * 0.71).cos())).collect();
    let data = write(raw_dir.path(), "raw.csv", &rows);
    let model = gaussian_model(raw_dir.path(), 5.0);

    let wall = TempDir::new().unwrap();
    ok(&dpss(&["release", "--data", p(&data), "--model", p(&model), "--epsilon", "1", "--seed", "7", "--out", p(&wall.path().join("rel.json"))]));
    std::fs::copy(&model, wall.path().join("model.json")).unwrap();
    drop(raw_dir);

    let w = wall.path();
    ok(&dpss_in(w, &["estimate", "--release", "rel.json", "--model", "model.json"]));
    ok(&dpss_in(w, &["bootstrap", "--release", "rel.json", "--model", "model.json", "--b-boot", "100", "--seed", "1"]));
    ok(&dpss_in(w, &["synth", "--release", "rel.json", "--model", "model.json", "--n-syn", "400", "--seed", "2", "--out", "syn.csv"]));
    ok(&dpss_in(w, &["analyze", "--data", "syn.csv", "--model", "model.json", "--mode", "noise-aware", "--release", "rel.json"]));
    let names: Vec<String> = std::fs::read_dir(w)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert!(!names.iter().any(|n| n == "raw.csv"));
}

#[test]
fn logistic_pipeline_with_public_design() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/logistic_10k.csv");
    write(d, "model.json", r#"{"model_id":"logistic","d":5,"clip":{"B_X":3},"design_csv":"design.csv"}"#);
    ok(&dpss_in(d, &["release", "--data", p(&data), "--model", "model.json", "--epsilon", "1", "--seed", "11", "--out", "rel.json", "--design-out", "design.csv"]));
    let rep = ok(&dpss_in(d, &["estimate", "--release", "rel.json", "--model", "model.json"]));
    let theta: Vec<f64> = rep["theta_hat"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    for (t, t0) in theta.iter().zip([0.5, -0.5, 0.3, -0.3, 0.2]) {
        assert!((t - t0).abs() < 0.15, "{theta:?}");
    }
    ok(&dpss_in(d, &["synth", "--release", "rel.json", "--model", "model.json", "--n-syn", "10000", "--seed", "3", "--out", "syn.csv"]));
    let syn = ok(&dpss_in(d, &["analyze", "--data", "syn.csv", "--model", "model.json", "--mode", "naive"]));
    assert_eq!(syn["theta_hat"].as_array().unwrap().len(), 5);
}

#[test]
fn experiment_output_is_thread_independent() {
    let dir = TempDir::new().unwrap();
    let cfg = serde_json::json!({"experiments": [
        {"experiment_id": "coverage_sweep", "n_grid": [200], "epsilon_grid": [0.5, 2.0], "replications": 30, "master_seed": 3, "b_boot": 40},
        {"experiment_id": "scaling_study", "n_grid": [100, 1000], "epsilon_grid": [1.0], "replications": 30, "master_seed": 3}
    ]});
    let cfg_path = write(dir.path(), "cfg.json", &to_json_string(&cfg).unwrap());
    let mut tables = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("out{threads}"));
        let res = Command::new(env!("CARGO_BIN_EXE_dpss"))
            .args(["experiment", "run", "--config", p(&cfg_path), "--out", p(&out)])
            .env("DPSS_THREADS", threads)
            .output()
            .unwrap();
        ok(&res);
        let manifest: Value = read_json(&out.join("manifest.json")).unwrap();
        assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
        assert_eq!(manifest["master_seeds"][0], 3);
        assert!(out.join("figures/coverage_sweep.csv").exists());
        assert!(out.join("figures/scaling_study_summary.csv").exists());
        tables.push(std::fs::read(out.join("coverage_sweep.csv")).unwrap());
        tables.push(std::fs::read(out.join("scaling_study.csv")).unwrap());
    }
    assert_eq!(tables[0], tables[2]);
    assert_eq!(tables[1], tables[3]);
}

#[test]
fn experiment_rejects_bad_config() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "cfg.json", r#"{"experiment_id":"scaling_study","n_grid":[],"epsilon_grid":[1],"replications":10,"master_seed":1}"#);
    let res = dpss(&["experiment", "run", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(code(&res), 2);
    let threads = Command::new(env!("CARGO_BIN_EXE_dpss"))
        .args(["experiment", "run", "--config", p(&cfg), "--out", p(&dir.path().join("o"))])
        .env("DPSS_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&threads), 2);
}
