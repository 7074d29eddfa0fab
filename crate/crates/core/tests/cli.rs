use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_attn-pgd"))
}

#[test]
fn gradcheck_writes_outputs_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin().args(["gradcheck", "--seed", "3", "--out"]).arg(dir.path()).status().unwrap();
    assert_eq!(status.code(), Some(0));
    for file in ["gradcheck.csv", "gradcheck_h_sweep.csv", "summary.json"] {
        assert!(dir.path().join(file).exists(), "missing {file}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 3);
}

#[test]
fn invalid_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"scaling": {"n_grid": [100, 200]}}"#).unwrap();
    let out = bin().args(["scaling", "--config"]).arg(&cfg).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(&cfg, r#"{"not_a_field": 1}"#).unwrap();
    let out = bin().args(["landscape", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
