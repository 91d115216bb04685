//! End-to-end command tests against the built binary, on a small synthetic
//! feature-table dataset plus the bundled MNIST files where the contract
//! depends on them.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn uca() -> Command {
    Command::new(env!("CARGO_BIN_EXE_uca"))
}

fn run(args: &[&str]) -> Output {
    uca().args(args).output().expect("binary runs")
}

fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .unwrap()
}

/// Two tiny correlated views as CSV tables; returns the config path.
fn synthetic_config(dir: &Path, out: &Path, k: usize) -> PathBuf {
    let mut rng = uca_core::RngStream::new(99);
    let n = 60;
    let d_x = 8;
    let d_y = 6;
    let mut x_csv = String::new();
    let mut y_csv = String::new();
    for _ in 0..n {
        let shared: Vec<f64> = (0..3).map(|_| rng.uniform() - 0.5).collect();
        let xrow: Vec<String> = (0..d_x)
            .map(|i| format!("{:.6}", shared[i % 3] + 0.1 * (rng.uniform() - 0.5)))
            .collect();
        let yrow: Vec<String> = (0..d_y)
            .map(|i| format!("{:.6}", shared[(i + 1) % 3] + 0.1 * (rng.uniform() - 0.5)))
            .collect();
        x_csv.push_str(&xrow.join(","));
        x_csv.push('\n');
        y_csv.push_str(&yrow.join(","));
        y_csv.push('\n');
    }
    std::fs::write(dir.join("x.csv"), x_csv).unwrap();
    std::fs::write(dir.join("y.csv"), y_csv).unwrap();
    let config = serde_json::json!({
        "dataset": {
            "builder": "feature-tables",
            "x_table": dir.join("x.csv"),
            "y_table": dir.join("y.csv"),
            "table_format": "csv",
            "test_images": null,
            "test_labels": null
        },
        "train": {
            "variant": "cyc-uca",
            "weights": {"lambda_c": 0.0, "lambda_xy": 1.0, "lambda_rec": 0.0, "lambda_orth": 0.0, "lambda_cyc": 1.0},
            "d": 3, "hidden": 16, "lr": 0.01, "lr_decay_epoch": 2, "lr_decay_factor": 0.5,
            "epochs": 3, "weight_decay": 1e-5, "batch_size": 16, "k": k, "seed": 11
        },
        "selection": {"component_index": 1, "n_pairs": 40, "similarity": "correlation", "extremal_rule": "argmax"},
        "baselines": {"cca10": false, "cca50": false, "sup_uca": false, "direct_gan": false, "oracle": true},
        "out": out,
        "workers": 2
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

#[test]
fn full_pipeline_on_synthetic_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("exp");
    let config = synthetic_config(dir.path(), &out, 3);
    let output = run(&["full", "--config", config.to_str().unwrap()]);
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    // pipeline artifacts all exist
    for file in [
        "config.json",
        "data/x.feat",
        "data/y.feat",
        "data/align.json",
        "runs/run_0000.uca",
        "runs/manifest.json",
        "selection.json",
        "eval/table.csv",
        "eval/table.txt",
    ] {
        assert!(out.join(file).exists(), "{file} missing");
    }
    // the summary went to stdout and has the oracle row
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("CycUCA"));
    assert!(stdout.contains("Oracle"));
}

#[test]
fn full_requires_force_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("exp");
    let config = synthetic_config(dir.path(), &out, 2);
    assert!(run(&["full", "--config", config.to_str().unwrap()]).status.success());
    let second = run(&["full", "--config", config.to_str().unwrap()]);
    assert_eq!(second.status.code(), Some(2));
    let forced = run(&["full", "--force", "--config", config.to_str().unwrap()]);
    assert!(forced.status.success());
}

#[test]
fn unknown_variant_is_a_config_error() {
    let output = run(&["train", "--variant", "mega-uca"]);
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn missing_input_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("exp");
    let config = synthetic_config(dir.path(), &out, 2);
    // train before prepare: the views are missing
    let output = run(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(3));
}

#[test]
fn select_needs_at_least_two_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("exp");
    let config = synthetic_config(dir.path(), &out, 1);
    assert!(run(&["prepare", "--config", config.to_str().unwrap()]).status.success());
    assert!(run(&["train", "--config", config.to_str().unwrap()]).status.success());
    let output = run(&["select", "--config", config.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(5));
}

/// Training and selection never touch the alignment file; evaluation
/// requires it.
#[test]
fn alignment_file_only_read_by_eval() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("exp");
    let config = synthetic_config(dir.path(), &out, 2);
    assert!(run(&["prepare", "--config", config.to_str().unwrap()]).status.success());
    std::fs::remove_file(out.join("data/align.json")).unwrap();
    assert!(
        run(&["train", "--config", config.to_str().unwrap()]).status.success(),
        "training must not need the alignment file"
    );
    assert!(
        run(&["select", "--config", config.to_str().unwrap()]).status.success(),
        "selection must not need the alignment file"
    );
    let eval = run(&["eval", "--config", config.to_str().unwrap()]);
    assert_eq!(eval.status.code(), Some(3), "evaluation requires alignment");
}

#[test]
fn variant_flag_overrides_weights_in_archived_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("exp");
    let config = synthetic_config(dir.path(), &out, 2);
    assert!(run(&[
        "prepare",
        "--config",
        config.to_str().unwrap(),
        "--variant",
        "latent-uca"
    ])
    .status
    .success());
    let archived: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(archived["train"]["variant"], "latent-uca");
    assert_eq!(archived["train"]["weights"]["lambda_cyc"], 0.0);
    assert_eq!(archived["train"]["weights"]["lambda_c"], 1.0);
    assert!(!archived["tool_version"].as_str().unwrap().is_empty());

    // and cyc-uca zeroes the latent/orth/rec weights
    assert!(run(&[
        "prepare",
        "--config",
        config.to_str().unwrap(),
        "--variant",
        "cyc-uca",
        "--force"
    ])
    .status
    .success());
    let archived: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(archived["train"]["weights"]["lambda_c"], 0.0);
    assert_eq!(archived["train"]["weights"]["lambda_orth"], 0.0);
    assert_eq!(archived["train"]["weights"]["lambda_rec"], 0.0);
    assert_eq!(archived["train"]["weights"]["lambda_cyc"], 1.0);
}

#[test]
fn prepare_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("exp");
    let config = synthetic_config(dir.path(), &out, 2);
    assert!(run(&["prepare", "--config", config.to_str().unwrap()]).status.success());
    let first = std::fs::read(out.join("data/x.feat")).unwrap();
    let align_first = std::fs::read(out.join("data/align.json")).unwrap();
    assert!(run(&["prepare", "--config", config.to_str().unwrap()]).status.success());
    assert_eq!(first, std::fs::read(out.join("data/x.feat")).unwrap());
    assert_eq!(align_first, std::fs::read(out.join("data/align.json")).unwrap());
}

#[test]
fn mnist_prepare_emits_view_files_with_expected_dims() {
    let root = workspace_root();
    let mnist = root.join("data/mnist/train-images-idx3-ubyte.gz");
    assert!(mnist.exists(), "bundled MNIST missing at {}", mnist.display());

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("exp");
    let config = serde_json::json!({
        "dataset": {
            "builder": "mnist-halves",
            "images": root.join("data/mnist/train-images-idx3-ubyte.gz"),
            "labels": root.join("data/mnist/train-labels-idx1-ubyte.gz"),
            "test_images": root.join("data/mnist/t10k-images-idx3-ubyte.gz"),
            "test_labels": root.join("data/mnist/t10k-labels-idx1-ubyte.gz"),
            "limit": 120
        },
        "train": {
            "variant": "latent-uca",
            "weights": {"lambda_c": 1.0, "lambda_xy": 1.0, "lambda_rec": 1.0, "lambda_orth": 1.0, "lambda_cyc": 0.0},
            "d": 4, "hidden": 16, "lr": 0.01, "lr_decay_epoch": 2, "lr_decay_factor": 0.5,
            "epochs": 1, "weight_decay": 1e-5, "batch_size": 16, "k": 1, "seed": 3
        },
        "selection": {"component_index": 1, "n_pairs": 50, "similarity": "correlation", "extremal_rule": "argmax"},
        "out": out
    });
    let config_path = dir.path().join("config.json");
    std::fs::write(&config_path, serde_json::to_string(&config).unwrap()).unwrap();
    let output = run(&["prepare", "--config", config_path.to_str().unwrap()]);
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    // halves of 28x28: 392 features per view
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("data/x.feat.json")).unwrap())
            .unwrap();
    assert_eq!(sidecar["cols"], 392);
    assert_eq!(sidecar["rows"], 120);
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("data/y_test.feat.json")).unwrap())
            .unwrap();
    assert_eq!(sidecar["cols"], 392);
    assert_eq!(sidecar["rows"], 10000);
}
