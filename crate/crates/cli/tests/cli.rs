use std::fs;
use std::path::Path;
use std::process::Command;

const SMALL: &str = r#"{
  "lattice": { "kind": "triangular" },
  "defect": { "kind": "vacancy" },
  "mm": { "kind": "taylor", "k_f": 1 },
  "r_dom": 20,
  "schedule": [4, 5, 6, 7],
  "buffer": 6,
  "r_mm": { "rule": "fixed", "value": 14 },
  "targets": { "slope": [-100, 0] }
}"#;

fn qmmm(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_qmmm")).args(args).output().unwrap()
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn reference_then_converge_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.json");
    fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("run");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    let r = qmmm(&["reference", "--config", c, "--out", o]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(summary(&out)["from_cache"], false);
    let r = qmmm(&["reference", "--config", c, "--out", o]);
    assert!(String::from_utf8_lossy(&r.stdout).contains("cached"));
    let r = qmmm(&["converge", "--config", c, "--out", o]);
    assert!(r.status.success());
    let s = summary(&out);
    assert_eq!(s["command"], "converge");
    assert_eq!(s["pass"], true);
    assert!(s["report"]["slope"].as_f64().unwrap() < 0.0);
    let csv = fs::read_to_string(out.join("converge.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "r_qm,r_mm,n_qm,n_mm,error,status,iterations,inner");
    assert_eq!(csv.lines().count(), 5);
    assert!(out.join("log_rqm_4.csv").exists());
}

#[test]
fn fit_ghostforce_and_decay() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("fit.json");
    fs::write(
        &cfg,
        SMALL
            .replace(r#""kind": "taylor", "k_f": 1"#, r#""kind": "mlip", "k_e": 2"#)
            .replace(r#""value": 14"#, r#""value": 12"#)
            .replace(r#""buffer": 6"#, r#""buffer": 4"#),
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    for cmd in ["fit", "ghostforce", "decay"] {
        let out = dir.path().join(cmd);
        let r = qmmm(&[cmd, "--config", c, "--out", out.to_str().unwrap()]);
        assert!(r.status.success(), "{cmd}: {}", String::from_utf8_lossy(&r.stderr));
        assert_eq!(summary(&out)["command"], cmd);
    }
    assert!(dir.path().join("fit/potential.json").exists());
    assert!(dir.path().join("fit/observations.csv").exists());
    assert!(dir.path().join("ghostforce/ghost_forces.csv").exists());
    assert!(dir.path().join("decay/decay.csv").exists());
}

#[test]
fn invalid_configs_exit_with_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, SMALL.replace("[4, 5, 6, 7]", "[6, 4]")).unwrap();
    let r = qmmm(&["converge", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("schedule"));
    let r = qmmm(&["converge", "--config", "/nonexistent.json", "--out", "/tmp/x"]);
    assert_eq!(r.status.code(), Some(2));
}
