use std::path::Path;
use std::process::{Command, Output};

fn fragsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fragsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, name: &str, json: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, json).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL: &str = r#"{
    "model": {"family": "uniform_binary"},
    "eta_grid": [0.1, 0.01],
    "replicas": 40,
    "master_seed": 3,
    "functionals": [
        {"kind": "energy", "psi": {"type": "const", "value": 1}, "p": -0.5},
        {"kind": "empirical", "f": {"type": "const", "value": 1}},
        {"kind": "lambda"}
    ],
    "tolerances": {"se_multiplier": 6}
}"#;

#[test]
fn phi_of_one_for_uniform_splits() {
    let o = fragsim(&["phi", "--family", "uniform_binary", "--p", "1"]);
    assert!(o.status.success());
    let v: f64 = stdout(&o).trim().parse().unwrap();
    assert!((v - 1.0 / 3.0).abs() < 1e-12);

    let o = fragsim(&["phi", "--family", "uniform_binary", "--p", "0", "--derivative"]);
    let lines: Vec<f64> = stdout(&o).lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(lines[0], 0.0);
    assert!((lines[1] - 0.5).abs() < 1e-8);
}

#[test]
fn malthusian_root_of_dirac_split() {
    let o = fragsim(&["malthus", "--family", "dirac_binary", "--b", "0.4", "--b2", "0.4"]);
    assert!(o.status.success());
    let v: f64 = stdout(&o).trim().parse().unwrap();
    let exact = 0.5f64.ln() / 0.4f64.ln() - 1.0;
    assert!((v - exact).abs() < 1e-8);
    assert!((v + 0.2435).abs() < 1e-4);

    let o = fragsim(&[
        "malthus",
        "--family",
        "dissipative_uniform_binary",
        "--kappa",
        "0.5",
        "--json",
    ]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((v["p_star"].as_f64().unwrap() + 0.24168503669434694).abs() < 1e-9);
}

#[test]
fn usage_errors_exit_with_two() {
    let o = fragsim(&["verify", "--config", "missing.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("hint"));
    assert_eq!(fragsim(&["phi", "--family", "uniform_binary"]).status.code(), Some(2));
    assert_eq!(fragsim(&["phi", "--family", "nope", "--p", "1"]).status.code(), Some(2));
    assert_eq!(fragsim(&["malthus", "--family", "dirac_binary"]).status.code(), Some(2));
    assert_eq!(
        fragsim(&["malthus", "--family", "uniform_binary", "--kappa", "0.5"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(fragsim(&["frobnicate"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", SMALL);
    for bad in [
        "replicas=many",
        "unknown_key=1",
        "tolerances.se_mult=3",
        "eta_grid=[0.01,0.1]",
    ] {
        let o = fragsim(&["verify", "--config", &cfg, "--set", bad]);
        assert_eq!(o.status.code(), Some(2), "{bad}");
    }
}

#[test]
fn limits_print_one_object_per_functional() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", SMALL);
    let o = fragsim(&["limits", "--config", &cfg]);
    assert!(o.status.success());
    let rows: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    for key in ["theorem", "value", "method", "error_estimate"] {
        assert!(rows[0].get(key).is_some(), "{key}");
    }
    assert!((rows[0]["value"].as_f64().unwrap() - 4.0).abs() < 1e-10);
    assert!((rows[1]["value"].as_f64().unwrap() - 1.0).abs() < 1e-10);
}

#[test]
fn report_reruns_from_its_embedded_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", SMALL);
    let report = dir.path().join("report.json");
    let trace = dir.path().join("trace.csv");
    let o = fragsim(&[
        "verify",
        "--config",
        &cfg,
        "--out",
        report.to_str().unwrap(),
        "--csv",
        trace.to_str().unwrap(),
    ]);
    assert!(o.status.code() == Some(0) || o.status.code() == Some(1));
    let first: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(first["schema"], "fragsim.report.v1");
    let header = std::fs::read_to_string(&trace)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    assert_eq!(header, "replica,eta,functional,value,normalized_value,lambda_mart");

    let again = dir.path().join("again.json");
    let o2 = fragsim(&[
        "verify",
        "--config",
        report.to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), o2.status.code());
    let second: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&again).unwrap()).unwrap();
    for key in ["config", "malthusian", "functionals", "verdicts", "passed"] {
        assert_eq!(first[key], second[key], "{key}");
    }
}

#[test]
fn overrides_change_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", SMALL);
    let out = dir.path().join("r.json");
    let o = fragsim(&[
        "verify",
        "--config",
        &cfg,
        "--set",
        "replicas=12",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_ne!(o.status.code(), Some(2));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(r["config"]["replicas"], 12);
    assert_eq!(r["functionals"][0]["levels"][0]["n"], 12);
}

#[test]
fn simulate_writes_line_and_events() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("line.csv");
    let events = dir.path().join("events.jsonl");
    let o = fragsim(&[
        "simulate",
        "--family",
        "dirac_binary",
        "--b",
        "0.5",
        "--b2",
        "0.5",
        "--eta",
        "0.1",
        "--csv",
        csv.to_str().unwrap(),
        "--dump-events",
        events.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 17);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",6.25e-2")));
    assert_eq!(std::fs::read_to_string(&events).unwrap().lines().count(), 15);
}

#[test]
fn sweep_needs_beta_family() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", SMALL);
    assert_eq!(
        fragsim(&["sweep", "--config", &cfg, "--eps", "0.1,0.01"]).status.code(),
        Some(2)
    );
}

#[test]
fn renewal_reports_final_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", SMALL);
    let table = dir.path().join("g.csv");
    let o = fragsim(&[
        "renewal",
        "--config",
        &cfg,
        "--paths",
        "2000",
        "--batches",
        "20",
        "--t-max",
        "4",
        "--h",
        "0.05",
        "--csv",
        table.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("constant 4.000000"));
    let text = std::fs::read_to_string(&table).unwrap();
    assert_eq!(text.lines().next(), Some("t,g,se,lower,upper,forcing"));
    assert_eq!(text.lines().count(), 81);
}
