use std::fs;
use std::process::Command;

const SYNTHETIC: &str = "[scenario]\nmax_rounds = 3\n[fl]\ndataset = \"synthetic\"\nhidden_layers = [8]\n";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hfl-vanet"))
}

#[test]
fn run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.toml");
    fs::write(&cfg, SYNTHETIC).unwrap();
    let out = dir.path().join("out");
    let status = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--seed", "2", "--max-hop", "2", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let rounds = fs::read_to_string(out.join("round_metrics.csv")).unwrap();
    assert_eq!(rounds.lines().count(), 4);
    let manifest = fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert!(manifest.contains("seed = 2"));
    assert!(manifest.contains("max_hop = 2"));
}

#[test]
fn bad_config_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[fl]\neta = -1.0\n").unwrap();
    let out = bin().args(["validate-config", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("eta"));
}
