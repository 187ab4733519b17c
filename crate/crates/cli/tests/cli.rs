use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "seed": 7,
  "model": {
    "input_shape": [1, 16, 16],
    "num_classes": 4,
    "num_exits": 3,
    "backbone": [
      {"kind": "conv", "channels": 8, "kernel": 3, "pad": 1},
      {"kind": "pool", "kernel": 2, "stride": 2},
      {"kind": "conv", "channels": 16, "kernel": 3, "pad": 1},
      {"kind": "pool", "kernel": 2, "stride": 2},
      {"kind": "conv", "channels": 16, "kernel": 3, "pad": 1}
    ]
  },
  "data": {"source": "synthetic", "classes": 4, "train_count": 600, "test_count": 300, "difficulty": 0.3},
  "train": {"learning_rate": 0.003, "epochs": 4, "batch_size": 16, "optimizer": {"kind": "adam", "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}, "validation_split": 0.2},
  "search": {"epsilon": 2.0, "step": 0.05}
}"#;

fn classex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_classex")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = classex(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn field(text: &str, key: &str) -> f64 {
    let line = text.lines().find(|l| l.starts_with(key)).unwrap_or_else(|| panic!("no {key} in {text}"));
    line[key.len()..].trim().trim_end_matches('%').parse().unwrap()
}

fn setup(dir: &Path) -> (String, String) {
    let cfg = dir.join("run.json");
    std::fs::write(&cfg, CONFIG).unwrap();
    (cfg.display().to_string(), dir.join("out").display().to_string())
}

#[test]
fn no_arguments_prints_usage() {
    let out = classex(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_subcommand_fails() {
    assert!(!classex(&["frobnicate"]).status.success());
}

#[test]
fn missing_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = classex(&["eval", "--checkpoint", dir.path().join("none.eecx").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path());
    let base = ["--config", cfg.as_str(), "--out", out.as_str()];
    let with = |extra: &[&str]| -> Vec<String> { base.iter().chain(extra).map(|s| s.to_string()).collect() };
    let run = |extra: &[&str]| {
        let args = with(extra);
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
    };

    run(&["train"]);
    let out_dir = Path::new(&out);
    assert!(out_dir.join("model.eecx").exists());

    run(&["search-beta"]);
    let audit = std::fs::read_to_string(out_dir.join("beta_audit.csv")).unwrap();
    assert!(audit.starts_with("exit_index,beta,val_accuracy,accepted\n"));

    let zero = run(&["eval", "--zero-betas"]);
    assert_eq!(field(&zero, "accuracy:"), field(&zero, "static accuracy:"));

    let eval = run(&["eval"]);
    assert!(field(&eval, "reduction:") >= 0.0, "{eval}");
    assert!(out_dir.join("traces.jsonl").exists());

    let infer = run(&["infer", "--index", "0,1,2"]);
    let lines: Vec<serde_json::Value> = infer.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    for t in &lines {
        for key in ["exit_layer", "predicted_class", "exit_reason", "flops", "events"] {
            assert!(t.get(key).is_some(), "missing {key}");
        }
    }

    run(&["compare-baseline"]);
    assert!(out_dir.join("comparison.csv").exists());

    run(&["report"]);
    for f in ["report.json", "exit_histogram.csv", "class_exit_percent.csv", "cumulative_excluded.csv"] {
        assert!(out_dir.join("report").join(f).exists(), "missing {f}");
    }
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    // One epoch is enough to compare bytes.
    std::fs::write(&cfg, CONFIG.replace("\"epochs\": 4", "\"epochs\": 1")).unwrap();
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        ok(&["--config", cfg.to_str().unwrap(), "--seed", "3", "--out", out.to_str().unwrap(), "train"]);
        bytes.push(std::fs::read(out.join("model.eecx")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}
