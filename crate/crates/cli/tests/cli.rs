//! End-to-end CLI behavior: exit codes, error records, overrides, and the
//! shape of each subcommand's outputs.

use std::path::Path;
use std::process::{Command, Output};

fn rlvr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlvr")).args(args).output().expect("spawning rlvr")
}

fn write_json(path: &Path, value: serde_json::Value) {
    std::fs::write(path, value.to_string()).unwrap();
}

fn gen_dataset(root: &Path, name: &str, mix: serde_json::Value, seed: u64) -> String {
    let cfg = root.join(format!("{name}.json"));
    write_json(&cfg, serde_json::json!({ "mix": mix, "seed": seed }));
    let out = root.join(name);
    let output = rlvr(&["gen", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(output.status.success());
    out.join("dataset.jsonl").to_str().unwrap().to_string()
}

#[test]
fn test_train_missing_dataset_emits_error_record_naming_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.json");
    write_json(
        &cfg,
        serde_json::json!({
            "dataset": "/nonexistent/data.jsonl",
            "group_size": 4, "groups_per_step": 2, "clip_low": 0.8, "clip_high": 1.28,
            "max_tokens": 8, "base_lr": 0.05, "warmup_fraction": 0.0, "total_steps": 1,
            "seed": 1, "stage": "stage1", "curriculum": false
        }),
    );
    let out = dir.path().join("run");
    let output =
        rlvr(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!output.status.success());
    let record: serde_json::Value =
        serde_json::from_slice(&output.stderr).expect("stderr is a JSON error record");
    assert_eq!(record["command"], "train");
    assert!(
        record["error"].as_str().unwrap().contains("/nonexistent/data.jsonl"),
        "error must name the missing path: {record}"
    );
}

#[test]
fn test_malformed_config_is_rejected_with_error_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    let out = dir.path().join("run");
    let output = rlvr(&["gen", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!output.status.success());
    let record: serde_json::Value = serde_json::from_slice(&output.stderr).unwrap();
    assert_eq!(record["command"], "gen");
}

#[test]
fn test_empty_dataset_after_filtering_fails_train() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let cfg = dir.path().join("train.json");
    write_json(
        &cfg,
        serde_json::json!({
            "dataset": empty,
            "group_size": 4, "groups_per_step": 2, "clip_low": 0.8, "clip_high": 1.28,
            "max_tokens": 8, "base_lr": 0.05, "warmup_fraction": 0.0, "total_steps": 1,
            "seed": 1, "stage": "stage1", "curriculum": false
        }),
    );
    let out = dir.path().join("run");
    let output =
        rlvr(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!output.status.success());
    let record: serde_json::Value = serde_json::from_slice(&output.stderr).unwrap();
    assert!(record["error"].as_str().unwrap().contains("dataset empty after filtering"));
}

#[test]
fn test_profile_filter_pipeline_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let dataset = gen_dataset(
        root,
        "data",
        serde_json::json!([
            {"family": "echo", "difficulty": 1, "count": 6},
            {"family": "echo", "difficulty": 2, "count": 6},
            {"family": "chain-max", "difficulty": 1, "count": 6}
        ]),
        3,
    );

    let profile_cfg = root.join("profile.json");
    write_json(
        &profile_cfg,
        serde_json::json!({"dataset": dataset, "budget": 16, "seed": 1, "n_rollouts": 4}),
    );
    let profile_out = root.join("profile");
    assert!(rlvr(&[
        "profile",
        "--config",
        profile_cfg.to_str().unwrap(),
        "--out",
        profile_out.to_str().unwrap()
    ])
    .status
    .success());
    // One profile line per problem with the documented fields.
    let profiles = std::fs::read_to_string(profile_out.join("profiles.jsonl")).unwrap();
    assert_eq!(profiles.lines().count(), 18);
    let first: serde_json::Value = serde_json::from_str(profiles.lines().next().unwrap()).unwrap();
    for key in ["problem_id", "n", "successes", "p_hat", "budget"] {
        assert!(first.get(key).is_some(), "profile line missing {key}");
    }
    let rho: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(profile_out.join("rho.json")).unwrap())
            .unwrap();
    assert!(rho.get("zero_count").is_some() && rho.get("one_count").is_some());

    let filter_cfg = root.join("filter.json");
    write_json(
        &filter_cfg,
        serde_json::json!({
            "dataset": dataset,
            "profiles": profile_out.join("profiles.jsonl")
        }),
    );
    let filter_out = root.join("filter");
    assert!(rlvr(&[
        "filter",
        "--config",
        filter_cfg.to_str().unwrap(),
        "--out",
        filter_out.to_str().unwrap()
    ])
    .status
    .success());
    for file in
        ["stage1_ids.json", "interior_ids.json", "stage1_dataset.jsonl", "interior_dataset.jsonl", "cutoffs.json"]
    {
        assert!(filter_out.join(file).exists(), "missing {file}");
    }
    // The cutoff report is a domain -> level map.
    let cutoffs: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(filter_out.join("cutoffs.json")).unwrap())
            .unwrap();
    assert!(cutoffs.is_object());
    assert!(cutoffs.get("echo").is_some());
}

#[test]
fn test_eaa_appends_column() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let table = root.join("table.csv");
    std::fs::write(
        &table,
        "model,benchmark,accuracy,mean_length\na,x,90,100\nb,x,80,300\nc,x,70,200\n",
    )
    .unwrap();
    let cfg = root.join("eaa.json");
    write_json(&cfg, serde_json::json!({"table": table, "gamma": 3.0}));
    let out = root.join("run");
    assert!(rlvr(&["eaa", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .status
        .success());
    let csv = std::fs::read_to_string(out.join("eval/eaa.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "model,benchmark,accuracy,mean_length,eaa");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    // Shortest model keeps its accuracy; longest is discounted by e^-3.
    assert_eq!(rows[0][4], "90.0000");
    let eaa_b: f64 = rows[1][4].parse().unwrap();
    assert!((eaa_b - 80.0 * (-3.0f64).exp()).abs() < 0.01);
}

#[test]
fn test_entropy_check_exits_zero_with_monotone_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("entropy.json");
    write_json(&cfg, serde_json::json!({"seed": 11, "n_policies": 3}));
    let out = dir.path().join("run");
    let output = rlvr(&[
        "entropy-check",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["all_monotone"], true);
    let traces = std::fs::read_to_string(out.join("traces.jsonl")).unwrap();
    assert_eq!(traces.lines().count(), 3);
    let trace: serde_json::Value = serde_json::from_str(traces.lines().next().unwrap()).unwrap();
    let h = trace["conditional_entropies"].as_array().unwrap();
    for pair in h.windows(2) {
        assert!(pair[1].as_f64().unwrap() <= pair[0].as_f64().unwrap() + 1e-12);
    }
}

#[test]
fn test_seed_override_changes_generated_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("gen.json");
    write_json(
        &cfg,
        serde_json::json!({"mix": [{"family": "echo", "difficulty": 3, "count": 5}], "seed": 1}),
    );
    let out1 = root.join("a");
    let out2 = root.join("b");
    assert!(rlvr(&["gen", "--config", cfg.to_str().unwrap(), "--out", out1.to_str().unwrap()])
        .status
        .success());
    assert!(rlvr(&[
        "gen",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out2.to_str().unwrap(),
        "--seed",
        "2"
    ])
    .status
    .success());
    let a = std::fs::read_to_string(out1.join("dataset.jsonl")).unwrap();
    let b = std::fs::read_to_string(out2.join("dataset.jsonl")).unwrap();
    assert_ne!(a, b, "seed override must change the dataset");
    // The echoed config records the effective seed.
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out2.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["seed"], 2);
}

#[test]
fn test_budget_override_reaches_training() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let dataset = gen_dataset(
        root,
        "data",
        serde_json::json!([{"family": "echo", "difficulty": 1, "count": 6}]),
        7,
    );
    let cfg = root.join("train.json");
    write_json(
        &cfg,
        serde_json::json!({
            "dataset": dataset,
            "group_size": 4, "groups_per_step": 2, "clip_low": 0.8, "clip_high": 1.28,
            "max_tokens": 32, "base_lr": 0.05, "warmup_fraction": 0.0, "total_steps": 2,
            "seed": 1, "stage": "stage1", "curriculum": false
        }),
    );
    let out = root.join("run");
    assert!(rlvr(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--budget",
        "8"
    ])
    .status
    .success());
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["max_tokens"], 8);
    // No sampled rollout may exceed the overridden budget.
    for line in std::fs::read_to_string(out.join("steps.jsonl")).unwrap().lines() {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(record["mean_length"].as_f64().unwrap() <= 8.0);
    }
    assert!(out.join("checkpoints/final.json").exists());
}

#[test]
fn test_train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let dataset = gen_dataset(
        root,
        "data",
        serde_json::json!([
            {"family": "echo", "difficulty": 1, "count": 8},
            {"family": "chain-max", "difficulty": 1, "count": 8}
        ]),
        9,
    );
    let train_cfg = root.join("train.json");
    write_json(
        &train_cfg,
        serde_json::json!({
            "dataset": dataset,
            "group_size": 4, "groups_per_step": 4, "clip_low": 0.8, "clip_high": 1.28,
            "max_tokens": 16, "base_lr": 0.05, "warmup_fraction": 0.05, "total_steps": 5,
            "seed": 4, "stage": "stage1", "curriculum": false
        }),
    );
    let train_out = root.join("train");
    assert!(rlvr(&[
        "train",
        "--config",
        train_cfg.to_str().unwrap(),
        "--out",
        train_out.to_str().unwrap()
    ])
    .status
    .success());

    let eval_cfg = root.join("eval.json");
    write_json(
        &eval_cfg,
        serde_json::json!({
            "dataset": dataset,
            "checkpoint": train_out.join("checkpoints/final.json"),
            "budget": 16, "k": 2, "n_samples": 4, "seed": 6
        }),
    );
    let eval_out = root.join("eval");
    assert!(rlvr(&[
        "eval",
        "--config",
        eval_cfg.to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap()
    ])
    .status
    .success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_out.join("eval/report.json")).unwrap())
            .unwrap();
    for key in
        ["pass1", "pass_k", "mean_length", "min_length", "max_length", "truncation_ratio", "mean_entropy"]
    {
        assert!(report.get(key).is_some(), "report missing {key}");
    }
    let pass1 = report["pass1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&pass1));
}

#[test]
fn test_worker_count_does_not_change_training_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let dataset = gen_dataset(
        root,
        "data",
        serde_json::json!([{"family": "echo", "difficulty": 2, "count": 8}]),
        5,
    );
    let cfg = root.join("train.json");
    write_json(
        &cfg,
        serde_json::json!({
            "dataset": dataset,
            "val_dataset": dataset,
            "group_size": 4, "groups_per_step": 4, "clip_low": 0.8, "clip_high": 1.28,
            "max_tokens": 16, "base_lr": 0.05, "warmup_fraction": 0.05, "total_steps": 4,
            "seed": 12, "stage": "stage1", "curriculum": false
        }),
    );
    let serial_out = root.join("serial");
    let parallel_out = root.join("parallel");
    assert!(rlvr(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        serial_out.to_str().unwrap()
    ])
    .status
    .success());
    let output = Command::new(env!("CARGO_BIN_EXE_rlvr"))
        .args(["train", "--config", cfg.to_str().unwrap(), "--out", parallel_out.to_str().unwrap()])
        .env("RLVR_WORKERS", "3")
        .output()
        .unwrap();
    assert!(output.status.success());
    // Checkpoints identical byte-for-byte; telemetry identical modulo time.
    let ck_a = std::fs::read(serial_out.join("checkpoints/final.json")).unwrap();
    let ck_b = std::fs::read(parallel_out.join("checkpoints/final.json")).unwrap();
    assert_eq!(ck_a, ck_b, "worker count changed the trained parameters");
    let mask = |path: &Path| -> Vec<serde_json::Value> {
        std::fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v["wall_ms"] = serde_json::Value::from(0.0);
                v
            })
            .collect()
    };
    assert_eq!(mask(&serial_out.join("steps.jsonl")), mask(&parallel_out.join("steps.jsonl")));
}

#[test]
fn test_sweep_reports_per_budget() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let dataset = gen_dataset(
        root,
        "data",
        serde_json::json!([{"family": "echo", "difficulty": 1, "count": 5}]),
        2,
    );
    let cfg = root.join("sweep.json");
    write_json(
        &cfg,
        serde_json::json!({"dataset": dataset, "budgets": [4, 8, 16], "n_samples": 2, "seed": 3}),
    );
    let out = root.join("run");
    assert!(rlvr(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .status
        .success());
    let reports: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("eval/sweep.json")).unwrap())
            .unwrap();
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 3);
    assert_eq!(reports[0]["budget"], 4);
    assert_eq!(reports[2]["budget"], 16);
    // Decreasing budgets are rejected.
    let bad_cfg = root.join("bad.json");
    write_json(
        &bad_cfg,
        serde_json::json!({"dataset": dataset, "budgets": [16, 8], "n_samples": 2, "seed": 3}),
    );
    let output =
        rlvr(&["sweep", "--config", bad_cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!output.status.success());
}
