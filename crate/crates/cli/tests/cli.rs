use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gabor-odo"));
    c.env_remove("GABOR_ODO_THREADS");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("spawn gabor-odo")
}

fn ok(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn err_json(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

const SMALL: &str = r#"
schema_version = 1
seed = 3
stride_ms = 33
[sensor]
view_px = 32
gain = 0.00195
[[textures]]
kind = "bandlimited_noise"
low_cpm = 10.0
high_cpm = 200.0
seed = 0
resolution_px = 256
extent_m = [0.5, 0.5]
[[paths]]
profile = "straight"
v = 0.2
duration_s = 2.5
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("exp.toml");
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn data_rows(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn simulate_row_count_is_duration_times_rate_plus_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let v = ok(&run(&["simulate", "--config", &cfg, "--out", "sim"], dir.path()));
    assert_eq!(v["samples"], 2501);
    for f in ["raw.csv", "signal.csv", "reference.csv", "gyro.csv"] {
        assert_eq!(data_rows(&dir.path().join("sim").join(f)), 2501, "{f}");
    }
    let header = std::fs::read_to_string(dir.path().join("sim/raw.csv")).unwrap();
    assert!(header.starts_with("t,"));
    assert!(!header.contains('\r'));
}

#[test]
fn simulate_decode_odometry_evaluate_chain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    ok(&run(&["simulate", "--config", &cfg, "--out", "sim"], dir.path()));
    let v = ok(&run(
        &["decode", "--config", &cfg, "--input", "sim/signal.csv", "--stride-ms", "10", "--out", "est.csv"],
        dir.path(),
    ));
    // (2501 - 1000) / 10 + 1 windows at a 10 ms stride.
    assert_eq!(v["windows"], 151);
    assert_eq!(v["accepted"], 151);
    let v = ok(&run(
        &["odometry", "--estimates", "est.csv", "--gyro", "sim/gyro.csv", "--out", "path.csv"],
        dir.path(),
    ));
    let x = v["endpoint"][0].as_f64().unwrap();
    assert!((x - 0.5).abs() < 0.05, "endpoint x {x}");
    let v = ok(&run(&["evaluate", "--estimate", "path.csv", "--reference", "sim/reference.csv"], dir.path()));
    assert!(v["ate_m"].as_f64().unwrap() < 0.05);
    assert!((v["path_length_m"].as_f64().unwrap() - 0.5).abs() < 1e-9);
}

#[test]
fn evaluate_identical_paths_gives_zero_ate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    ok(&run(&["simulate", "--config", &cfg, "--out", "sim"], dir.path()));
    let v = ok(&run(
        &["evaluate", "--estimate", "sim/reference.csv", "--reference", "sim/reference.csv", "--out", "report.json"],
        dir.path(),
    ));
    assert_eq!(v["ate_m"], 0.0);
    assert_eq!(v["drift_pct"], 0.0);
    let saved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(saved, v);
}

#[test]
fn optimize_with_flat_objective_returns_the_start() {
    let dir = tempfile::tempdir().unwrap();
    // A uniform texture gives no signal: every window is rejected and the
    // objective is the same constant everywhere.
    let mut pgm = b"P5\n64 64\n255\n".to_vec();
    pgm.extend(std::iter::repeat_n(128u8, 64 * 64));
    std::fs::write(dir.path().join("flat.pgm"), pgm).unwrap();
    let text = r#"
schema_version = 1
[sensor]
view_px = 32
[[textures]]
kind = "image_file"
path = "flat.pgm"
[[paths]]
profile = "straight"
v = 0.2
duration_s = 2.0
[optimizer]
random_starts = 0
scenario_count = 5
windows_per_scenario = 1
"#;
    let cfg = write_config(dir.path(), text);
    let v = ok(&run(&["optimize-masks", "--config", &cfg, "--start", "9,0.7,0.5", "--out", "opt"], dir.path()));
    assert_eq!(v["best_params"]["xi0"], 9.0);
    assert_eq!(v["best_params"]["sigma"], 0.7);
    assert_eq!(v["best_params"]["alpha"], 0.5);
    assert_eq!(v["best_objective"], v["baseline_objective"]);
    let result: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("opt/optimize_result.json")).unwrap()).unwrap();
    assert_eq!(result["best_params"], v["best_params"]);
    assert!(dir.path().join("opt/masks.json").is_file());
}

#[test]
fn gen_texture_and_condition() {
    let dir = tempfile::tempdir().unwrap();
    let v = ok(&run(&["gen-texture", "--seed", "4", "--out", "t.pgm"], dir.path()));
    assert_eq!(v["width"], 1024);
    let bytes = std::fs::read(dir.path().join("t.pgm")).unwrap();
    assert!(bytes.starts_with(b"P5\n1024 1024\n255\n"));
    assert_eq!(bytes.len(), "P5\n1024 1024\n255\n".len() + 1024 * 1024);

    // One second of a 10 Hz differential tone at 41.6 kHz.
    let mut csv = String::from("t,s_cos_p,s_cos_m,s_sin_p,s_sin_m\n");
    for k in 0..41_600 {
        let t = k as f64 / 41_600.0;
        let a = 2.0 * std::f64::consts::PI * 10.0 * t;
        csv += &format!("{t:.9},{:.9},{:.9},{:.9},{:.9}\n", 1.0 + 0.1 * a.cos(), 1.0, 1.0 + 0.1 * a.sin(), 1.0);
    }
    std::fs::write(dir.path().join("daq.csv"), csv).unwrap();
    let v = ok(&run(&["condition", "--input", "daq.csv", "--out", "cond.csv"], dir.path()));
    assert_eq!(v["input_samples"], 41_600);
    assert_eq!(v["output_samples"], 1000);
    assert_eq!(data_rows(&dir.path().join("cond.csv")), 1000);
}

#[test]
fn experiment_is_repeatable_and_respects_thread_env() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = ok(&run(&["experiment", "--config", &cfg, "--out", "a", "--jobs", "2"], dir.path()));
    let out = bin()
        .args(["experiment", "--config", &cfg, "--out", "a"])
        .env("GABOR_ODO_THREADS", "1")
        .current_dir(dir.path())
        .output()
        .unwrap();
    let b = ok(&out);
    assert_eq!(a["status"], "complete");
    assert_eq!(a["digest"], b["digest"]);
    for f in ["manifest.json", "resolved_config.toml", "summary.csv", "summary.md", "standard/scenario_0000/overlay.svg"] {
        assert!(dir.path().join("a").join(f).is_file(), "{f}");
    }
    let bad = bin()
        .args(["experiment", "--config", &cfg, "--out", "c"])
        .env("GABOR_ODO_THREADS", "many")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(err_json(&bad)["error"]["kind"], "config");
}

#[test]
fn failures_are_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let e = err_json(&run(&["simulate", "--config", "missing.toml"], dir.path()));
    assert_eq!(e["error"]["stage"], "simulate");
    assert_eq!(e["error"]["kind"], "io");
    assert!(e["error"]["message"].as_str().unwrap().contains("missing.toml"));

    let out = run(&["decode", "--input", "x.csv", "--stride-ms", "7"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(err_json(&out)["error"]["kind"], "usage");

    let cfg = write_config(dir.path(), &SMALL.replace("v = 0.2", "v = \"fast\""));
    let e = err_json(&run(&["experiment", "--config", &cfg], dir.path()));
    assert_eq!(e["error"]["kind"], "config");

    std::fs::write(dir.path().join("bad.csv"), "t,x\n0,1\n").unwrap();
    let e = err_json(&run(&["evaluate", "--estimate", "bad.csv", "--reference", "bad.csv"], dir.path()));
    assert_eq!(e["error"]["stage"], "evaluate");
    assert_eq!(e["error"]["kind"], "format");
}
