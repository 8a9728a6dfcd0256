use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn biphoton(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_biphoton"))
        .current_dir(cwd)
        .env_remove("BIPHOTON_SEED")
        .env_remove("BIPHOTON_CONFIG")
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn read_curve(path: &Path) -> Vec<(f64, f64, f64)> {
    let mut r = csv::Reader::from_path(path).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["sigma", "value", "stderr"]);
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            let f = |i: usize| rec[i].parse::<f64>().unwrap();
            (f(0), f(1), f(2))
        })
        .collect()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_defaults_write_one_trace_per_sigma() {
    let tmp = TempDir::new().unwrap();
    let o = biphoton(tmp.path(), &["--out", "run", "simulate"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = tmp.path().join("run");
    for s in ["0", "0.5", "1", "2", "10"] {
        let csv = fs::read_to_string(out.join(format!("trace_sigma_{s}.csv"))).unwrap();
        assert!(csv.starts_with("tau_fs,value_hz,stderr_hz\n"));
        assert_eq!(csv.lines().count(), 502);
        let side = json(&out.join(format!("trace_sigma_{s}.json")));
        assert_eq!(side["meta"]["n_realizations"], 10000);
        assert_eq!(side["run_stats"]["n_effective"], 10000);
    }
    let resolved = json(&out.join("config.resolved.json"));
    assert_eq!(resolved["grid"]["n_pos"], 30);
    assert!(out.join("timing.json").exists());
}

#[test]
fn fixed_seed_is_byte_reproducible_and_seed_sensitive() {
    let tmp = TempDir::new().unwrap();
    let args = |dir: &'static str, seed: &'static str| {
        vec!["--seed", seed, "--sigma", "1", "--realizations", "500", "--out", dir, "simulate"]
    };
    for (d, s) in [("a", "42"), ("b", "42"), ("c", "43")] {
        assert_eq!(code(&biphoton(tmp.path(), &args(d, s))), 0);
    }
    let read = |d: &str| fs::read(tmp.path().join(d).join("trace_sigma_1.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn seed_from_environment_matches_flag() {
    let tmp = TempDir::new().unwrap();
    let o = biphoton(tmp.path(), &["--seed", "9", "--sigma", "1", "--realizations", "300", "--out", "flag", "simulate"]);
    assert_eq!(code(&o), 0);
    let o = Command::new(env!("CARGO_BIN_EXE_biphoton"))
        .current_dir(tmp.path())
        .env("BIPHOTON_SEED", "9")
        .args(["--sigma", "1", "--realizations", "300", "--out", "env", "simulate"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let read = |d: &str| fs::read(tmp.path().join(d).join("trace_sigma_1.csv")).unwrap();
    assert_eq!(read("flag"), read("env"));
}

#[test]
fn resolved_config_reproduces_the_run() {
    let tmp = TempDir::new().unwrap();
    let o = biphoton(tmp.path(), &["--seed", "5", "--sigma", "0.5,2", "--realizations", "400", "--tau-step", "2", "--out", "first", "simulate"]);
    assert_eq!(code(&o), 0);
    let mut cfg = json(&tmp.path().join("first/config.resolved.json"));
    cfg["output"]["directory"] = Value::String("second".into());
    fs::write(tmp.path().join("again.json"), cfg.to_string()).unwrap();
    let o = biphoton(tmp.path(), &["--config", "again.json", "simulate"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for s in ["0.5", "2"] {
        for ext in ["csv", "json"] {
            let name = format!("trace_sigma_{s}.{ext}");
            assert_eq!(
                fs::read(tmp.path().join("first").join(&name)).unwrap(),
                fs::read(tmp.path().join("second").join(&name)).unwrap(),
                "{name}"
            );
        }
    }
}

#[test]
fn configuration_errors_exit_with_code_1() {
    let tmp = TempDir::new().unwrap();
    let o = biphoton(tmp.path(), &["--tau-step", "0", "simulate"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("tau"));

    fs::write(tmp.path().join("bad.json"), "{\n  \"grid\": {\n    \"n_pos\": 16,\n    \"bins\": 3\n  }\n}\n").unwrap();
    let o = biphoton(tmp.path(), &["--config", "bad.json", "simulate"]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bins") && err.contains("line 4"), "{err}");

    assert_eq!(code(&biphoton(tmp.path(), &["--sigma", "-1", "sweep"])), 1);
    assert_eq!(code(&biphoton(tmp.path(), &["--workers", "0", "simulate"])), 1);
    assert_eq!(code(&biphoton(tmp.path(), &["--seed", "abc", "simulate"])), 1);
    assert_eq!(code(&biphoton(tmp.path(), &["frobnicate"])), 1);
    assert_eq!(code(&biphoton(tmp.path(), &["--config", "missing.json", "simulate"])), 1);
}

#[test]
fn verify_defaults_pass_and_report() {
    let tmp = TempDir::new().unwrap();
    let o = biphoton(tmp.path(), &["--out", "v", "verify"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let report = json(&tmp.path().join("v/verify_report.json"));
    assert_eq!(report["passed"], true);
    let checks = report["checks"].as_array().unwrap();
    let pure = checks
        .iter()
        .find(|c| c["name"] == "distance_to_pure" && c["sigma"] == 0.0)
        .unwrap();
    assert_eq!(pure["value"], 0.0);
}

#[test]
fn verify_with_corrupted_tolerance_exits_with_code_3() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("strict.json"), r#"{"verify": {"tolerance": 1e-9}}"#).unwrap();
    let o = biphoton(tmp.path(), &["--config", "strict.json", "--out", "v", "verify"]);
    assert_eq!(code(&o), 3);
    let report = json(&tmp.path().join("v/verify_report.json"));
    assert_eq!(report["passed"], false);
}

#[test]
fn sweep_fraction_crosses_half_near_0_833() {
    let tmp = TempDir::new().unwrap();
    let o = biphoton(tmp.path(), &["--sigma", "0:3:0.1", "--realizations", "2000", "--out", "s", "sweep"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let frac = read_curve(&tmp.path().join("s/fraction.csv"));
    assert_eq!(frac.len(), 31);
    assert!(frac.windows(2).all(|w| w[1].1 < w[0].1));
    let cross = frac
        .windows(2)
        .find(|w| w[0].1 >= 0.5 && w[1].1 < 0.5)
        .map(|w| w[0].0 + (w[1].0 - w[0].0) * (w[0].1 - 0.5) / (w[0].1 - w[1].1))
        .unwrap();
    assert!((cross - 0.833).abs() <= 0.05, "{cross}");
    let summary = json(&tmp.path().join("s/sweep.json"));
    assert!((summary["fraction_half_crossing"].as_f64().unwrap() - cross).abs() < 1e-12);

    // background rises with σ; allow Monte-Carlo jitter once it has saturated
    let bg = read_curve(&tmp.path().join("s/background.csv"));
    for w in bg.windows(2) {
        let slack = 3.0 * (w[0].2.powi(2) + w[1].2.powi(2)).sqrt();
        assert!(w[1].1 >= w[0].1 - slack, "{:?}", w);
    }
    assert!(bg[0].1.abs() < 1e-3);
    assert!(bg[30].1 > 20.0);
}

#[test]
fn sweep_default_sigmas_are_monotone() {
    let tmp = TempDir::new().unwrap();
    let o = biphoton(tmp.path(), &["--out", "s", "sweep"]);
    assert_eq!(code(&o), 0);
    let bg = read_curve(&tmp.path().join("s/background.csv"));
    let peak = read_curve(&tmp.path().join("s/peak_ratio.csv"));
    assert!(bg.windows(2).all(|w| w[1].1 > w[0].1));
    assert!(peak.windows(2).all(|w| w[1].1 < w[0].1 + 3.0 * w[1].2));
    assert!((peak[2].1 - (-1f64).exp()).abs() <= 4.0 * peak[2].2);
}

#[test]
fn single_sigma_sweep_writes_single_rows() {
    let tmp = TempDir::new().unwrap();
    let o = biphoton(tmp.path(), &["--sigma", "1", "--realizations", "500", "--out", "s", "sweep"]);
    assert_eq!(code(&o), 0);
    for name in ["fraction", "background", "peak_ratio"] {
        assert_eq!(read_curve(&tmp.path().join(format!("s/{name}.csv"))).len(), 1);
    }
}

#[test]
fn fit_of_simulated_sigma0_trace() {
    let tmp = TempDir::new().unwrap();
    let o = biphoton(tmp.path(), &["--sigma", "0", "--realizations", "1", "--out", "sim", "simulate"]);
    assert_eq!(code(&o), 0);
    let o = biphoton(tmp.path(), &["--out", "fit", "fit", "sim/trace_sigma_0.csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&tmp.path().join("fit/fit.json"));
    let b = report["fit"]["b_hz"].as_f64().unwrap();
    let mu = report["fit"]["mu"].as_f64().unwrap();
    // The simulated trace has a cos² shape, so σ′ from the cos model does
    // not round-trip; B and μ do.
    assert!((b / 708.71 - 1.0).abs() < 0.02, "{b}");
    assert!((mu / 0.0275 - 1.0).abs() < 0.02, "{mu}");
    assert!(report["width"]["nm"].as_f64().unwrap() > 0.0);
}

#[test]
fn fit_echoes_width_in_nm() {
    let tmp = TempDir::new().unwrap();
    let mut csv = String::from("tau_fs,value_hz\n");
    for i in -250..=250 {
        let t = i as f64;
        let v = 708.71 * (0.0275 * t).cos() * (-0.5 * 0.022f64.powi(2) * t * t).exp();
        csv.push_str(&format!("{t},{v}\n"));
    }
    fs::write(tmp.path().join("model.csv"), csv).unwrap();
    let o = biphoton(tmp.path(), &["--out", "f", "fit", "model.csv"]);
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("nm"), "{stdout}");
    let report = json(&tmp.path().join("f/fit.json"));
    assert!((report["width"]["nm"].as_f64().unwrap() - 21.0).abs() <= 0.5);
    for (key, want) in [("b_hz", 708.71), ("mu", 0.0275), ("sigma_p", 0.022)] {
        let got = report["fit"][key].as_f64().unwrap();
        assert!((got / want - 1.0).abs() < 0.01, "{key}: {got}");
    }
}

#[test]
fn fit_failures_have_distinct_codes() {
    let tmp = TempDir::new().unwrap();
    let o = biphoton(tmp.path(), &["--sigma", "10", "--realizations", "2000", "--out", "sim", "simulate"]);
    assert_eq!(code(&o), 0);
    let o = biphoton(tmp.path(), &["--out", "fit", "fit", "sim/trace_sigma_10.csv"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stderr).contains("did not converge"));

    fs::write(tmp.path().join("broken.csv"), "tau_fs,value_hz\n0,1\n1,oops\n").unwrap();
    let o = biphoton(tmp.path(), &["--out", "fit", "fit", "broken.csv"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("row 3"));
    assert_eq!(code(&biphoton(tmp.path(), &["fit", "nowhere.csv"])), 1);
}

#[test]
fn poisson_noise_option_marks_traces() {
    let tmp = TempDir::new().unwrap();
    fs::write(
        tmp.path().join("noisy.json"),
        r#"{"noise": {"poisson": true, "acquisition_time": 100, "dark_rate": 100}, "ensemble": {"sigmas": [0], "n_realizations": 1}}"#,
    )
    .unwrap();
    let o = biphoton(tmp.path(), &["--config", "noisy.json", "--out", "n", "simulate"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let side = json(&tmp.path().join("n/trace_sigma_0.json"));
    assert_eq!(side["meta"]["kind"], "measured-sim");
    assert_eq!(side["meta"]["acquisition_time_s"], 100.0);
}
