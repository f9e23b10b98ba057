use std::fs;
use std::path::Path;
use std::process::Command;

fn nk(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_nk")).args(args).output().expect("run nk")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn hermite_table_has_relu_a2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("h");
    let r = nk(&["hermite", "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let table = fs::read_to_string(out.join("coefficients.csv")).unwrap();
    let header: Vec<&str> = table.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "a(xi=0)").unwrap();
    let row: Vec<f64> = table.lines().nth(3).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row[0], 2.0);
    let want = 1.0 / (2.0 * (2.0 * std::f64::consts::PI).sqrt());
    assert!((row[col] - want).abs() < 1e-12);
    for f in ["activation.csv", "magnitude.csv", "rectified.csv", "envelope.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn lenk_verify_fixture_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let r = nk(&["lenk-verify", "--out", dir.path().to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let rep = json(&dir.path().join("lenk_report.json"));
    let orders = rep["orders"].as_array().unwrap();
    let last = orders.last().unwrap()["cumulative_error"].as_f64().unwrap();
    assert!(last <= 1e-8, "{last}");
}

#[test]
fn zero_step_bounds_are_admissible() {
    let dir = tempfile::tempdir().unwrap();
    let r = nk(&["bounds", "--eta-lr", "0", "--out", dir.path().to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let chk = json(&dir.path().join("step_check.json"));
    assert_eq!(chk["admissible"], true);
    assert_eq!(chk["psi_hat_delta"].as_f64().unwrap(), 0.0);
    let local = json(&dir.path().join("local_ledger.json"));
    for n in local["nodes"].as_array().unwrap() {
        assert_eq!(n["psi_hat_delta_sq"].as_f64().unwrap(), 0.0);
    }
}

#[test]
fn runs_are_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"builder": {"kind": "relu", "n": 2, "widths": [6, 1]}, "trials": 100, "draws": 20, "samples": 10}"#)
        .unwrap();
    let mut outs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let r = nk(&["rademacher", "--config", cfg.to_str().unwrap(), "--seed", "5", "--out", out.to_str().unwrap()]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        outs.push(out);
    }
    for f in ["rademacher.json", "rademacher.csv"] {
        assert_eq!(fs::read(outs[0].join(f)).unwrap(), fs::read(outs[1].join(f)).unwrap(), "{f}");
    }
}

#[test]
fn kernels_gram_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let r = nk(&["kernels", "--kernel", "ntk", "--out", dir.path().to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let g = fs::read_to_string(dir.path().join("gram_ntk.csv")).unwrap();
    assert!(g.lines().count() >= 2);
}

#[test]
fn invalid_config_exits_with_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"no_such_field": 1}"#).unwrap();
    let out = dir.path().join("out");
    let r = nk(&["bounds", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());

    fs::write(&cfg, r#"{"dataset": "missing.json"}"#).unwrap();
    let r = nk(&["bounds", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));

    let r = nk(&["bounds", "--eta", "1.5", "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
}
