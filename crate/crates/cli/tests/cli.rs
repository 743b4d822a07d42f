use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn quasirand(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quasirand"))
        .args(args)
        .env_remove("QUASIRAND_SEED")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn simulate_writes_one_row_per_method_and_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let res = quasirand(&["simulate", "--scenario", "S4", "--overlap", "low", "--reps", "20", "--out", out]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let rows = csv_rows(&dir.path().join("summary.csv"));
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r[0] == "S4" && r[1] == "low"));
    assert_eq!(csv_rows(&dir.path().join("replicates.csv")).len(), 20 * 3 * 2);
    assert!(dir.path().join("overlap_hist.csv").exists());
}

#[test]
fn simulate_s7_ilr_and_pilr_agree() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let res = quasirand(&["simulate", "--scenario", "s7", "--reps", "10", "--out", out]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let rows = csv_rows(&dir.path().join("summary.csv"));
    let find = |m: &str, p: &str| rows.iter().find(|r| r[2] == m && r[3] == p).unwrap()[4..].to_vec();
    for p in ["beta_c1", "mu"] {
        assert_eq!(find("ILR", p), find("PILR", p));
    }
}

#[test]
fn simulate_rejects_unknown_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let res = quasirand(&["simulate", "--scenario", "S9", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("S9"), "{}", stderr(&res));
}

#[test]
fn numstudy_single_point_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let path = dir.path().join(name);
        let res = quasirand(&[
            "numstudy", "--n", "2000", "--f-c", "0.19", "--f-r", "0.1", "--overlap", "low", "--out",
            path.to_str().unwrap(),
        ]);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
        fs::read(path).unwrap()
    };
    let a = run("a.csv");
    assert_eq!(a, run("b.csv"));
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 1 + 3);
}

#[test]
fn numstudy_rejects_bad_fractions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.csv");
    let res = quasirand(&["numstudy", "--n", "1000", "--f-r", "1.5", "--out", path.to_str().unwrap()]);
    assert_eq!(code(&res), 2);
}

fn write_samples(dir: &Path, conv: &str, reference: &str) -> (String, String) {
    let c = dir.join("conv.csv");
    let r = dir.join("ref.csv");
    fs::write(&c, conv).unwrap();
    fs::write(&r, reference).unwrap();
    (c.to_str().unwrap().to_string(), r.to_str().unwrap().to_string())
}

#[test]
fn estimate_with_constant_covariate_returns_the_sample_mean() {
    let dir = tempfile::tempdir().unwrap();
    // A covariate that is constant in both files leaves only the intercept,
    // so every convenience unit gets the same weight.
    let conv = "y,x,pi_r\n1.0,1,0.1\n2.0,1,0.1\n4.5,1,0.1\n0.5,1,0.1\n";
    let reference = "x,pi_r\n1,0.1\n1,0.1\n1,0.1\n";
    let (c, r) = write_samples(dir.path(), conv, reference);
    let res = quasirand(&["estimate", "--conv", &c, "--ref", &r, "--methods", "clw", "--ridge", "1e-8"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let v: Value = serde_json::from_slice(&res.stdout).unwrap();
    let mu = v["results"][0]["mu_hat"].as_f64().unwrap();
    assert!((mu - 2.0).abs() < 1e-9, "{mu}");
    assert_eq!(v["schema"], 1);
}

#[test]
fn estimate_ilr_without_pi_r_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (c, r) = write_samples(dir.path(), "y,x\n1,0.2\n2,0.4\n", "x,pi_r\n0.1,0.5\n0.3,0.5\n");
    let res = quasirand(&["estimate", "--conv", &c, "--ref", &r, "--methods", "ilr"]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("conv_pi_r"), "{}", stderr(&res));
}

#[test]
fn estimate_reports_every_requested_method() {
    let dir = tempfile::tempdir().unwrap();
    let mut conv = String::from("y,x,pi_r\n");
    let mut reference = String::from("x,pi_r\n");
    for i in 0..60 {
        let x = (i as f64 * 0.37).sin() + 0.5;
        conv.push_str(&format!("{},{x},{}\n", 1.0 + x + (i as f64 * 1.3).cos(), 0.2 + 0.005 * i as f64));
    }
    for i in 0..80 {
        let x = (i as f64 * 0.71).cos();
        reference.push_str(&format!("{x},{}\n", 0.2 + 0.005 * i as f64));
    }
    let (c, r) = write_samples(dir.path(), &conv, &reference);
    let out = dir.path().join("est.json");
    let res = quasirand(&[
        "estimate", "--conv", &c, "--ref", &r, "--methods", "ilr,pilr,clw,alp", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let v: Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    let results = v["results"].as_array().unwrap();
    let names: Vec<&str> = results.iter().map(|r| r["method"].as_str().unwrap()).collect();
    assert_eq!(names, ["ILR", "PILR", "CLW", "ALP"]);
    for r in &results[..3] {
        assert!(r["diagnostics"]["converged"].as_bool().unwrap());
        assert_eq!(r["diagnostics"]["n_pi_c_above_one"], 0);
        assert!(r["se"].as_f64().unwrap() > 0.0);
    }
    assert!(results[3]["diagnostics"]["n_pi_c_above_one"].is_u64());
}

#[test]
fn verify_passes_and_detects_perturbation() {
    let ok = quasirand(&["verify", "--gradient-instances", "5"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    let bad = quasirand(&["verify", "--gradient-instances", "1", "--perturb", "1e-6"]);
    assert_eq!(code(&bad), 1);
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
    let six = quasirand(&["verify", "--gradient-instances", "1", "--n-max", "6"]);
    assert_eq!(code(&six), 0);
    assert!(String::from_utf8_lossy(&six.stdout).contains("N=6"));
    assert_eq!(code(&quasirand(&["verify", "--n-max", "7"])), 2);
}

#[test]
fn seed_environment_variable_overrides_flag() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed_env: Option<&str>, seed_flag: &str, sub: &str| {
        let out = dir.path().join(sub);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_quasirand"));
        cmd.args(["simulate", "--scenario", "S4", "--reps", "5", "--seed", seed_flag, "--out", out.to_str().unwrap()]);
        match seed_env {
            Some(s) => cmd.env("QUASIRAND_SEED", s),
            None => cmd.env_remove("QUASIRAND_SEED"),
        };
        let res = cmd.output().unwrap();
        (code(&res), fs::read(out.join("summary.csv")).unwrap_or_default())
    };
    let (c1, a) = run(Some("42"), "1", "a");
    let (c2, b) = run(None, "42", "b");
    assert_eq!((c1, c2), (0, 0));
    assert_eq!(a, b);
    let (c3, _) = run(Some("not-a-seed"), "1", "c");
    assert_eq!(c3, 2);
}

#[test]
fn zero_threads_is_a_usage_error() {
    let res = quasirand(&["--threads", "0", "verify", "--gradient-instances", "1"]);
    assert_eq!(code(&res), 2);
}
