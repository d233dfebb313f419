use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
name = "small"

[data.synthetic]
name = "small"
vocab_size = 6
dim = 8
seed = 11
tasks = [
  { samples = 400, observed_weights = [0.7, 0.2, 0.1] },
  { samples = 400, observed_weights = [0.7, 0.2, 0.1] },
]

[train]
steps = 40
batch_size = 32
"#;

fn fairpref(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairpref"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", SMALL);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = fairpref(&["train", "--config", &cfg, "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["matrix.csv", "metrics.json", "groups.csv", "step_1/policy.json", "step_2/policy.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    // re-running from the echoed config gives the same artifacts
    let c = tmp.path().join("c");
    let echoed = a.join("config.json");
    let o = fairpref(&["train", "--config", s(&echoed), "--out", s(&c)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(a.join("matrix.csv")).unwrap(),
        std::fs::read(c.join("matrix.csv")).unwrap()
    );
    let matrix = std::fs::read_to_string(a.join("matrix.csv")).unwrap();
    assert!(matrix.starts_with("step,task_1,task_2\n"));
    assert_eq!(matrix.lines().count(), 3);
}

#[test]
fn echoed_config_has_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", SMALL);
    let out = tmp.path().join("run");
    assert!(fairpref(&["train", "--config", &cfg, "--out", s(&out)]).status.success());
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    let o = &echoed["train"]["objective"];
    assert_eq!(o["beta"], 0.1);
    assert_eq!(o["gamma"], 2.0);
    assert_eq!(o["lambda_dpo"], 1.0);
}

#[test]
fn references_match_previous_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", SMALL);
    let out = tmp.path().join("run");
    assert!(fairpref(&["train", "--config", &cfg, "--out", s(&out)]).status.success());
    assert_eq!(
        std::fs::read(out.join("step_1/policy.json")).unwrap(),
        std::fs::read(out.join("step_2/reference.json")).unwrap()
    );
}

#[test]
fn unknown_key_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", "[train.objective]\ngamm = 2.0\n");
    let o = fairpref(&["train", "--config", &cfg, "--out", s(&tmp.path().join("r"))]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("gamm"), "{err}");
    assert!(!tmp.path().join("r").exists());
}

#[test]
fn negative_beta_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", "[train.objective]\nbeta = -1.0\n");
    let o = fairpref(&["train", "--config", &cfg, "--out", s(&tmp.path().join("r"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("beta"));
}

#[test]
fn gamma_sweep_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", &SMALL.replace("steps = 40", "steps = 10"));
    let out = tmp.path().join("sweep");
    let o = fairpref(&[
        "sweep", "--config", &cfg, "--gamma", "0,0.5,1,2,5", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "beta,gamma,task_1,task_2,MFT,MFN,MAA,BWT");
    assert_eq!(lines.len(), 6);
    let gammas: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(gammas, ["0", "0.5", "1", "2", "5"]);
    assert!(out.join("beta_0.1_gamma_2/matrix.csv").exists());

    let par = tmp.path().join("par");
    let o = fairpref(&[
        "sweep", "--config", &cfg, "--gamma", "0,0.5,1,2,5", "--parallel", "--out", s(&par),
    ]);
    assert!(o.status.success());
    assert_eq!(csv, std::fs::read_to_string(par.join("sweep.csv")).unwrap());

    let report = tmp.path().join("report.csv");
    let a = out.join("beta_0.1_gamma_0");
    let b = out.join("beta_0.1_gamma_2");
    let o = fairpref(&["report", "--runs", s(&a), s(&b), "--out", s(&report)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().next().unwrap().ends_with("MFT,MFN,MAA,BWT,minority_final"));
}

#[test]
fn verify_bounds_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bounds.json");
    let o = fairpref(&[
        "verify-bounds", "--instances", "1000", "--n", "8", "--seed", "7", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let agg = &report["aggregate"];
    assert_eq!(agg["instances"], 1000);
    assert!(agg["preconditions_met"].as_u64().unwrap() > 0);
    assert_eq!(agg["violations"], 0);
    assert_eq!(report["instances"].as_array().unwrap().len(), 1000);
}

#[test]
fn gen_data_writes_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", SMALL);
    let out = tmp.path().join("data");
    let o = fairpref(&["gen-data", "--spec", &cfg, "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["total_records"], 800);
    assert!(out.join("task_1/eval.jsonl").exists());

    // a dataset edited after generation is refused
    let train = out.join("task_0/train.jsonl");
    let text = std::fs::read_to_string(&train).unwrap();
    std::fs::write(&train, text.replacen("\"group_id\":0", "\"group_id\":1", 1)).unwrap();
    let cfg2 = write(
        tmp.path(),
        "d.toml",
        &format!("[data]\ndataset = {:?}\n", out.to_str().unwrap()),
    );
    let o = fairpref(&["train", "--config", &cfg2, "--out", s(&tmp.path().join("r"))]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mismatch"));
}

#[test]
fn missing_config_is_io_error() {
    let o = fairpref(&["train", "--config", "/nonexistent/c.toml", "--out", "/tmp/x"]);
    assert_eq!(o.status.code(), Some(5));
}
