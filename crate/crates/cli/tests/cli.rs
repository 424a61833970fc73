use serde_json::Value;
use std::process::{Command, Output};

fn qmvd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qmvd")).args(args).output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr_error(out: &Output) -> (i32, String) {
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["schema"], "1");
    (out.status.code().unwrap(), v["error"]["kind"].as_str().unwrap().to_string())
}

#[test]
fn calibrate_reports_c_and_kappa() {
    let v = stdout_json(&qmvd(&["--group", "H1", "calibrate", "--nodes", "5000", "--p", "2,4"]));
    assert_eq!(v["schema"], "1");
    assert_eq!(v["command"], "calibrate");
    assert!((v["calibration"]["c"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    let k4 = v["kappa"][1]["kappa"].as_f64().unwrap();
    assert!((k4 - 2.0).abs() < 0.01, "{k4}");
}

#[test]
fn missing_group_is_a_usage_error() {
    assert_eq!(stderr_error(&qmvd(&["calibrate"])), (2, "usage".into()));
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_qmvd"))
        .env("QMVD_THREADS", "zero")
        .args(["--group", "H1", "calibrate", "--nodes", "100"])
        .output()
        .unwrap();
    assert_eq!(stderr_error(&out), (2, "usage".into()));
}

#[test]
fn identity_map_report_is_all_ones() {
    let v = stdout_json(&qmvd(&["--group", "H1", "--nodes", "4000", "map-report", "--map", "identity", "--samples", "200"]));
    for key in ["k", "k_outer", "k_inner"] {
        assert!((v["distortion"][key].as_f64().unwrap() - 1.0).abs() < 1e-9);
    }
    for rep in v["inequalities"].as_array().unwrap() {
        assert_eq!(rep["outer_bound"]["holds"], true);
    }
}

#[test]
fn malformed_descriptor_is_a_parse_error() {
    let out = qmvd(&["--group", "H1", "map-report", "--map", "winding:x"]);
    assert_eq!(stderr_error(&out), (1, "parse".into()));
}

#[test]
fn duplicate_targets_rejected() {
    let out = qmvd(&["--group", "H1", "--nodes", "2000", "defects", "--map", "winding:2", "--r", "10", "--targets", "0.1,0.2,0.3;0.1,0.2,0.3"]);
    assert_eq!(stderr_error(&out).0, 1);
}

#[test]
fn defects_of_winding_map() {
    let v = stdout_json(&qmvd(&[
        "--group", "H1", "--nodes", "4000", "defects", "--map", "winding:2", "--r", "10", "--targets", "0.3,0.2,0.1;-0.5,0.1,0.4;inf",
    ]));
    assert_eq!(v["nu_unit"].as_f64().unwrap(), 2.0);
    assert_eq!(v["targets"][0]["count"], 2);
    assert_eq!(v["targets"][2]["count"], 0);
    assert_eq!(v["targets"][2]["defect"].as_f64().unwrap(), 1.0);
}

#[test]
fn capacity_closed_form_only() {
    let v = stdout_json(&qmvd(&["--group", "H1", "--nodes", "4000", "capacity", "--closed-form-only"]));
    let kp = v["kappa_p"].as_f64().unwrap();
    assert!((v["closed_form"].as_f64().unwrap() - kp).abs() < 1e-12);
    assert!(v["runs"].as_array().unwrap().is_empty());
}

#[test]
fn config_file_algebra() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("h1.toml");
    std::fs::write(&good, "name = \"mine\"\nn1 = 2\nn2 = 1\n[[bracket]]\ni = 0\nj = 1\nm = 0\nvalue = -4.0\n").unwrap();
    let v = stdout_json(&qmvd(&["--config", good.to_str().unwrap(), "calibrate", "--nodes", "2000"]));
    assert_eq!(v["group"], "mine");
    assert!((v["calibration"]["c"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "n1 = 2\n").unwrap();
    let out = qmvd(&["--config", bad.to_str().unwrap(), "calibrate", "--nodes", "100"]);
    assert_eq!(stderr_error(&out), (1, "parse".into()));
}

#[test]
fn outputs_written_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for sub in ["a", "b"] {
        let d = dir.path().join(sub);
        let out = qmvd(&["--group", "H1", "--nodes", "3000", "--out", d.to_str().unwrap(), "polar-check", "--samples", "20000"]);
        assert!(out.status.success());
        let json = std::fs::read(d.join("polar-check.json")).unwrap();
        assert_eq!(json, out.stdout);
        files.push((json, std::fs::read(d.join("polar.csv")).unwrap()));
    }
    assert_eq!(files[0], files[1]);
}
