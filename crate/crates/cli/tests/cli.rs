use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../../scenarios/{name}.json"))
}

fn polstab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polstab"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = polstab(args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn err(args: &[&str]) -> Value {
    let out = polstab(args);
    assert!(!out.status.success());
    serde_json::from_slice(&out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_then_compare() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    let sc = scenario("hardware-default");
    let args = |dir: &Path, seed: &'static str| {
        vec![
            "simulate".to_string(),
            s(&sc).to_string(),
            "--iterations".into(),
            "800".into(),
            "--seed".into(),
            seed.into(),
            "--out-dir".into(),
            s(dir).to_string(),
        ]
    };
    let run_a: Vec<String> = args(&a, "1");
    let v = ok(&run_a.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(v["summary"]["iterations"], 800);
    assert_eq!(v["summary"]["seed"], 1);
    assert!(a.join("errors.csv").exists());
    assert!(a.join("summary.json").exists());

    let run_b: Vec<String> = args(&b, "2");
    ok(&run_b.iter().map(String::as_str).collect::<Vec<_>>());

    let cmp = d.path().join("cmp");
    let v = ok(&["compare", s(&a), s(&b), "--out-dir", s(&cmp)]);
    assert_eq!(v["states"].as_array().unwrap().len(), 3);
    assert!(cmp.join("comparison.json").exists());

    let self_cmp = ok(&["compare", s(&a), s(&a)]);
    for st in self_cmp["states"].as_array().unwrap() {
        assert_eq!(st["paired_rms"], 0.0);
    }
}

#[test]
fn compare_rejects_different_lengths() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    let sc = scenario("hardware-default");
    ok(&[
        "simulate",
        s(&sc),
        "--iterations",
        "300",
        "--out-dir",
        s(&a),
    ]);
    ok(&[
        "simulate",
        s(&sc),
        "--iterations",
        "200",
        "--out-dir",
        s(&b),
    ]);
    let e = err(&["compare", s(&a), s(&b)]);
    assert_eq!(e["error"], "grid_mismatch");
}

#[test]
fn calibrate_writes_a_runnable_scenario() {
    let d = tempfile::tempdir().unwrap();
    let v = ok(&[
        "calibrate",
        s(&scenario("calibration")),
        "--out-dir",
        s(d.path()),
    ]);
    assert!(d.path().join("calibration.json").exists());
    let cal = PathBuf::from(v["scenario"].as_str().unwrap());
    assert!(cal.exists());
    for e in v["calibration"]["basis_errors_deg"].as_array().unwrap() {
        assert!(e.as_f64().unwrap() < 0.5);
    }
    let run = d.path().join("run");
    let v = ok(&[
        "simulate",
        s(&cal),
        "--iterations",
        "1000",
        "--out-dir",
        s(&run),
    ]);
    assert_eq!(v["summary"]["events"]["lock_lost"], 0);
}

#[test]
fn tomography_adds_a_series() {
    let d = tempfile::tempdir().unwrap();
    let v = ok(&[
        "tomography",
        s(&scenario("hardware-default")),
        "--iterations",
        "5000",
        "--out-dir",
        s(d.path()),
    ]);
    assert!(d.path().join("tomography.csv").exists());
    let t = &v["summary"]["tomography"];
    assert!(t["count"].as_u64().unwrap() >= 2);
    assert!(t["state_successive"]["mean"].as_f64().unwrap() > 0.8);
}

#[test]
fn spectrum_finds_an_injected_tone() {
    let d = tempfile::tempdir().unwrap();
    let rate = 1000.0;
    // bin 20 of a 256-point transform after averaging by 4
    let f = 20.0 * rate / 4.0 / 256.0;
    let rows: String = (0..1024)
        .map(|n| {
            let x = 0.5 * (2.0 * std::f64::consts::PI * f * n as f64 / rate).sin();
            format!("{},{}\n", 1000.0 * (1.0 + x), 1000.0 * (1.0 - x))
        })
        .collect();
    let input = d.path().join("counts.csv");
    std::fs::write(&input, rows).unwrap();
    let cfg = d.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"levels": [{"factor": 4, "fft_length": 256, "n_average": 1}]}"#,
    )
    .unwrap();
    let out = d.path().join("out");
    let v = ok(&[
        "spectrum",
        s(&input),
        "--config",
        s(&cfg),
        "--rate",
        "1000",
        "--offset",
        "0",
        "--out-dir",
        s(&out),
    ]);
    assert!(out.join("spectrum_level0.csv").exists());
    assert!(out.join("peaks.json").exists());
    let top = &v["peaks"][0]["peaks"][0];
    assert_eq!(top["bin"], 20);
    assert!((top["frequency"].as_f64().unwrap() - f).abs() < 1e-9);
}

#[test]
fn spectrum_reports_short_input() {
    let d = tempfile::tempdir().unwrap();
    let input = d.path().join("counts.csv");
    std::fs::write(&input, "10,10\n20,20\n").unwrap();
    let e = err(&["spectrum", s(&input), "--out-dir", s(d.path())]);
    assert_eq!(e["error"], "insufficient_samples");
}

#[test]
fn errors_are_json_on_stderr() {
    let e = err(&["simulate", "/nonexistent/scenario.json"]);
    assert_eq!(e["error"], "io");
    assert!(!e["message"].as_str().unwrap().is_empty());

    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.json");
    std::fs::write(&bad, "{\"loop_rate\": -1}").unwrap();
    let e = err(&["simulate", s(&bad), "--out-dir", s(d.path())]);
    assert_eq!(e["error"], "config");
}
