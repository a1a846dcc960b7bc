//! End-to-end tests of the `met` binary: pipeline wiring, machine-readable
//! outputs, determinism under a fixed seed, and the documented exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn met() -> Command {
    Command::new(env!("CARGO_BIN_EXE_met"))
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("met-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, epochs: usize, alpha: f64) -> PathBuf {
    let path = dir.join("config.json");
    let config = serde_json::json!({
        "model": {
            "image_height": 16, "image_width": 16, "patch": 8,
            "dim": 16, "layers": 3, "heads": 4, "num_classes": 3
        },
        "train": {
            "lr": 0.01, "weight_decay": 0.0, "batch_size": 16,
            "epochs": epochs, "warmup_epochs": 1, "alpha": alpha,
            "bottleneck": 4, "seed": 9, "exits": [1, 2, 3]
        }
    });
    std::fs::write(&path, serde_json::to_vec_pretty(&config).unwrap()).unwrap();
    path
}

fn json_stdout(output: &Output) -> serde_json::Value {
    assert!(
        output.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    serde_json::from_slice(&output.stdout).expect("stdout is JSON")
}

/// Build the standard fixture: config, dataset, backbone, short training run.
fn trained_fixture(tag: &str, epochs: usize, alpha: f64) -> (PathBuf, PathBuf) {
    let dir = workdir(tag);
    let config = write_config(&dir, epochs, alpha);
    for (offset, name) in [(0usize, "train"), (32, "test")] {
        let out = met()
            .args([
                "synth-data",
                "--seed",
                "5",
                "--classes",
                "3",
                "--per-class",
                "32",
                "--image-size",
                "16",
                "--sample-offset",
                &offset.to_string(),
                "--out",
            ])
            .arg(dir.join(name))
            .output()
            .unwrap();
        json_stdout(&out);
    }
    let out = met()
        .args(["init-backbone", "--config"])
        .arg(&config)
        .args(["--seed", "3", "--out"])
        .arg(&dir)
        .output()
        .unwrap();
    json_stdout(&out);

    let out = met()
        .args(["tune", "--config"])
        .arg(&config)
        .arg("--data")
        .arg(dir.join("train"))
        .arg("--val-data")
        .arg(dir.join("test"))
        .arg("--backbone")
        .arg(dir.join("backbone"))
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    json_stdout(&out);
    (dir, config)
}

#[test]
fn unknown_flag_exits_with_usage_code() {
    let dir = workdir("badflag");
    let config = write_config(&dir, 2, 0.0);
    let out = met()
        .args(["flops", "--config"])
        .arg(&config)
        .arg("--definitely-not-a-flag")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn count_params_prints_pinned_total() {
    let dir = workdir("count");
    let config = dir.join("config.json");
    let doc = serde_json::json!({
        "model": {
            "image_height": 224, "image_width": 224, "patch": 16,
            "dim": 768, "layers": 12, "heads": 12, "num_classes": 100
        },
        "train": {
            "lr": 0.01, "weight_decay": 0.0, "alpha": 0.01,
            "bottleneck": 30, "seed": 1, "exits": [10, 11, 12]
        }
    });
    std::fs::write(&config, serde_json::to_vec_pretty(&doc).unwrap()).unwrap();
    let out = met()
        .args(["count-params", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    let json = json_stdout(&out);
    assert_eq!(json["total"], 91260);
    assert_eq!(json["naive"], 3041280);
    let reduction = json["leading_order_reduction_percent"].as_f64().unwrap();
    assert!((reduction - 98.4848).abs() < 0.001);

    // the documented flag overrides work too
    let out = met()
        .args(["count-params", "--config"])
        .arg(&config)
        .args(["--dprime", "30", "--exits", "10,11,12"])
        .output()
        .unwrap();
    assert_eq!(json_stdout(&out)["total"], 91260);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn flops_reports_vit_b16_baseline() {
    let dir = workdir("flops");
    let config = dir.join("config.json");
    let doc = serde_json::json!({
        "model": {
            "image_height": 224, "image_width": 224, "patch": 16,
            "dim": 768, "layers": 12, "heads": 12, "num_classes": 1000
        },
        "train": {
            "lr": 0.01, "weight_decay": 0.0, "alpha": 0.01,
            "bottleneck": 30, "seed": 1
        }
    });
    std::fs::write(&config, serde_json::to_vec_pretty(&doc).unwrap()).unwrap();
    let out = met()
        .args(["flops", "--config"])
        .arg(&config)
        .arg("--bare")
        .output()
        .unwrap();
    let json = json_stdout(&out);
    let gflops = json["exits"][0]["gflops"].as_f64().unwrap();
    assert!((gflops - 17.58).abs() / 17.58 < 0.02, "bare cost {gflops}");
    assert!((json["baseline_gflops"].as_f64().unwrap() - gflops).abs() < 1e-12);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn synth_data_is_deterministic_under_seed() {
    let dir = workdir("synth");
    for name in ["a", "b"] {
        let out = met()
            .args([
                "synth-data",
                "--seed",
                "11",
                "--classes",
                "2",
                "--per-class",
                "4",
                "--image-size",
                "8",
                "--out",
            ])
            .arg(dir.join(name))
            .output()
            .unwrap();
        json_stdout(&out);
    }
    let a = std::fs::read(dir.join("a/images.bin")).unwrap();
    let b = std::fs::read(dir.join("b/images.bin")).unwrap();
    assert_eq!(a, b);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn pipeline_train_eval_calibrate_route() {
    let (dir, config) = trained_fixture("pipeline", 8, 0.01);

    // metrics file shape: header plus (exits + all) rows per split per epoch
    let metrics = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,split,exit,ce,acc,graph_term,total_loss,lr");
    assert_eq!(lines.len(), 1 + 8 * 2 * 4);

    // anytime evaluation at each exit; cost grows with the exit index
    let mut costs = Vec::new();
    for exit in 1..=3 {
        let out = met()
            .args(["eval-anytime", "--config"])
            .arg(&config)
            .arg("--backbone")
            .arg(dir.join("backbone"))
            .arg("--checkpoint")
            .arg(dir.join("checkpoint_final"))
            .arg("--data")
            .arg(dir.join("test"))
            .args(["--exit", &exit.to_string()])
            .output()
            .unwrap();
        let json = json_stdout(&out);
        assert_eq!(json["exit"], exit);
        costs.push(json["cost_mega_macs"].as_f64().unwrap());
    }
    assert!(costs[0] < costs[1] && costs[1] < costs[2]);

    // profile export then calibration and budgeted evaluation
    let profile = dir.join("profile.csv");
    let out = met()
        .args(["export-profile", "--config"])
        .arg(&config)
        .arg("--backbone")
        .arg(dir.join("backbone"))
        .arg("--checkpoint")
        .arg(dir.join("checkpoint_final"))
        .arg("--data")
        .arg(dir.join("test"))
        .arg("--out")
        .arg(&profile)
        .output()
        .unwrap();
    json_stdout(&out);
    let text = std::fs::read_to_string(&profile).unwrap();
    assert!(text.starts_with("sample,exit,confidence,label\n"));
    assert_eq!(text.lines().count(), 1 + 96 * 3);

    let budget_gflops = 0.5 * (costs[0] + costs[2]) / 1e3;
    let out = met()
        .args(["calibrate", "--config"])
        .arg(&config)
        .args(["--budget", &budget_gflops.to_string(), "--profile"])
        .arg(&profile)
        .arg("--out")
        .arg(dir.join("thresholds.json"))
        .output()
        .unwrap();
    let json = json_stdout(&out);
    assert!(json["calibration_mean_cost_gflops"].as_f64().unwrap() <= budget_gflops * (1.0 + 1e-9));
    assert!(dir.join("thresholds.json").exists());

    let out = met()
        .args(["eval-budgeted", "--config"])
        .arg(&config)
        .arg("--backbone")
        .arg(dir.join("backbone"))
        .arg("--checkpoint")
        .arg(dir.join("checkpoint_final"))
        .arg("--data")
        .arg(dir.join("test"))
        .args(["--budget", &budget_gflops.to_string(), "--profile"])
        .arg(&profile)
        .output()
        .unwrap();
    let json = json_stdout(&out);
    let fractions: Vec<f64> = json["exit_fractions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!((fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9);

    // infeasible budget exits with 3
    let out = met()
        .args(["eval-budgeted", "--config"])
        .arg(&config)
        .arg("--backbone")
        .arg(dir.join("backbone"))
        .arg("--checkpoint")
        .arg(dir.join("checkpoint_final"))
        .arg("--data")
        .arg(dir.join("test"))
        .args(["--budget", "0.0000001", "--profile"])
        .arg(&profile)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn alpha_zero_run_has_zero_graph_column() {
    let (dir, _) = trained_fixture("alphazero", 2, 0.0);
    let metrics = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    for line in metrics.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let graph_term: f64 = fields[5].parse().unwrap();
        assert_eq!(graph_term, 0.0, "line {line}");
    }
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn tune_is_deterministic_under_seed() {
    let (dir_a, _) = trained_fixture("det-a", 3, 0.01);
    let (dir_b, _) = trained_fixture("det-b", 3, 0.01);
    let a = std::fs::read_to_string(dir_a.join("metrics.csv")).unwrap();
    let b = std::fs::read_to_string(dir_b.join("metrics.csv")).unwrap();
    assert_eq!(a, b);
    let ca = std::fs::read(dir_a.join("checkpoint_final.bin")).unwrap();
    let cb = std::fs::read(dir_b.join("checkpoint_final.bin")).unwrap();
    assert_eq!(ca, cb);
    std::fs::remove_dir_all(&dir_a).unwrap();
    std::fs::remove_dir_all(&dir_b).unwrap();
}
