use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn divgnn(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_divgnn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "divgnn {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_train_eval_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let bounds = dir.path().join("bounds.toml");
    fs::write(&bounds, "global_elem_size = [14.0, 16.0]\nhole_elem_size = [3.0, 4.0]\n").unwrap();
    let data = dir.path().join("data");
    divgnn(&[
        "gen-dataset",
        "--out",
        p(&data),
        "--count",
        "10",
        "--seed",
        "5",
        "--bounds",
        p(&bounds),
        "--workers",
        "2",
    ]);
    for f in ["manifest.json", "stats.json", "config.toml", "sample_00000.json"] {
        assert!(data.join(f).is_file(), "{f} missing");
    }

    let info = divgnn(&["inspect", p(&data.join("sample_00003.json"))]);
    let v: serde_json::Value = serde_json::from_slice(&info.stdout).unwrap();
    assert_eq!(v["id"], 3);
    assert!(v["nodes"].as_u64().unwrap() > 50);
    assert!(v["periodic_pairs"].as_u64().unwrap() > 0);

    let run = dir.path().join("run");
    let train = divgnn(&[
        "train", "--data", p(&data), "--out", p(&run), "--model", "p-gnn", "--epochs", "2", "--patience", "1",
        "--hidden", "8", "--steps", "2", "--lambda", "5",
    ]);
    assert!(String::from_utf8_lossy(&train.stderr).contains("lambda ignored"));
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["variant"], "p-gnn");

    let eval = dir.path().join("eval");
    divgnn(&[
        "eval",
        "--data",
        p(&data),
        "--ckpt",
        p(&run.join("checkpoint.bin")),
        "--out",
        p(&eval),
        "--export-fields",
        "1",
    ]);
    let metrics = fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert!(metrics.lines().any(|l| l.starts_with("fem,")));
    assert!(metrics.lines().any(|l| l.starts_with("p-gnn,")));
    let vtk: Vec<_> = fs::read_dir(eval.join("vtk/p-gnn")).unwrap().collect();
    assert_eq!(vtk.len(), 1);
}

#[test]
fn rejects_bad_arguments() {
    let out = Command::new(env!("CARGO_BIN_EXE_divgnn"))
        .args(["train", "--data", "/nonexistent", "--out", "/tmp/x", "--model", "mlp"])
        .output()
        .unwrap();
    assert!(!out.status.success());

    let out = Command::new(env!("CARGO_BIN_EXE_divgnn"))
        .args(["inspect", "/nonexistent/sample.json"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/sample.json"));
}
