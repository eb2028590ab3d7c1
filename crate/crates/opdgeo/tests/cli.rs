//! End-to-end tests of the `opdgeo` binary: exit codes, on-disk layout,
//! reproducible manifests, and the analyze/quadsim/effopd-report flows.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_opdgeo")
}

fn run_bin(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(bin());
    cmd.args(args);
    // Keep the output-root resolution deterministic regardless of the
    // invoking shell's environment.
    cmd.env_remove("OPDGEO_OUT");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary spawns")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process not killed by signal")
}

fn base_config(mode: &str, seeds: &[u64], steps: usize, stride: usize) -> Value {
    serde_json::json!({
        "task": {"kind": "mod_sum", "modulus": 8, "answer_len": 1, "seed": 5},
        "model": {"vocab_size": 11, "context_len": 6, "d_model": 10, "hidden": 16, "layers": 2},
        "mode": mode,
        "seeds": seeds,
        "steps": steps,
        "ckpt_stride": stride
    })
}

fn write_config(dir: &Path, value: &Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(value).unwrap()).unwrap();
    path
}

/// The single run directory under `root`, created by a one-seed train call.
fn only_run_dir(root: &Path) -> PathBuf {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(dirs.len(), 1, "expected exactly one run dir in {}", root.display());
    dirs.pop().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap_or_else(|e| {
        panic!("cannot read {}: {e}", path.display());
    }))
    .unwrap()
}

#[test]
fn missing_config_file_is_a_config_error() {
    let out = run_bin(&["train", "--config", "/nonexistent/nope.json"], &[]);
    assert_eq!(exit_code(&out), 2, "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("config error"), "stderr: {}", stderr_of(&out));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config("opd", &[11], 2, 1);
    cfg["learning_rate_typo"] = serde_json::json!(0.5);
    let path = write_config(dir.path(), &cfg);
    let out = run_bin(&["train", "--config", path.to_str().unwrap()], &[]);
    assert_eq!(exit_code(&out), 2, "stderr: {}", stderr_of(&out));
    let err = stderr_of(&out);
    assert!(err.contains("unknown field"), "stderr: {err}");
}

#[test]
fn unknown_nested_task_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config("opd", &[11], 2, 1);
    cfg["task"]["bogus"] = serde_json::json!(1);
    let path = write_config(dir.path(), &cfg);
    let out = run_bin(&["train", "--config", path.to_str().unwrap()], &[]);
    assert_eq!(exit_code(&out), 2, "stderr: {}", stderr_of(&out));
}

#[test]
fn inconsistent_model_and_task_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config("opd", &[11], 2, 1);
    // Vocabulary too small to encode the task's tokens.
    cfg["model"]["vocab_size"] = serde_json::json!(3);
    let path = write_config(dir.path(), &cfg);
    let out = run_bin(&["train", "--config", path.to_str().unwrap()], &[]);
    assert_eq!(exit_code(&out), 2, "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("vocab"), "stderr: {}", stderr_of(&out));
}

#[test]
fn bad_flag_value_is_rejected_by_the_parser() {
    let out = run_bin(&["analyze", "--run", "x", "--analyses", "nonsense"], &[]);
    assert_eq!(exit_code(&out), 2, "stderr: {}", stderr_of(&out));
}

#[test]
fn train_writes_a_complete_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = base_config("opd", &[11], 4, 2);
    let path = write_config(dir.path(), &cfg);
    let root = dir.path().join("runs");
    let out = run_bin(
        &["train", "--config", path.to_str().unwrap(), "--out", root.to_str().unwrap()],
        &[],
    );
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));

    let run = only_run_dir(&root);
    let run_id = run.file_name().unwrap().to_str().unwrap().to_string();
    assert!(run_id.starts_with("opd-s11-"), "run id: {run_id}");

    let manifest = read_json(&run.join("manifest.json"));
    assert_eq!(manifest["run_id"], run_id.as_str());
    assert_eq!(manifest["mode"], "opd");
    assert_eq!(manifest["seed"], 11);
    let steps: Vec<u64> = manifest["checkpoints"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, vec![0, 2, 4]);
    for step in [0, 2, 4] {
        assert!(run.join(format!("ckpt/{step}.json")).is_file());
        assert!(run.join(format!("ckpt/{step}.bin")).is_file());
    }

    // The stored config is fully resolved: defaults filled, seeds narrowed.
    let stored = read_json(&run.join("config.json"));
    assert_eq!(stored["seeds"], serde_json::json!([11]));
    assert!(stored["lr"].is_number());
    assert!(stored["batch"].is_number());

    // Every metrics table names the config digest and seed on line one.
    let digest = manifest["config_digest"].as_str().unwrap();
    let csv = std::fs::read_to_string(run.join("metrics/steps.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), format!("# config_digest={digest} seed=11"));
    assert_eq!(lines.next().unwrap(), "step,loss,mean_reward,kl_to_teacher,delta_norm,accuracy");
    assert_eq!(lines.count(), 4, "one row per training step");
}

#[test]
fn rerun_reproduces_the_manifest_digest_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = base_config("opd", &[11], 3, 1);
    let path = write_config(dir.path(), &cfg);

    let mut digests = Vec::new();
    for root in ["a", "b"] {
        let out_root = dir.path().join(root);
        let out = run_bin(
            &["train", "--config", path.to_str().unwrap(), "--out", out_root.to_str().unwrap()],
            &[],
        );
        assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));
        let stdout = stdout_of(&out);
        let token = stdout
            .split_whitespace()
            .skip_while(|w| *w != "manifest_digest")
            .nth(1)
            .expect("train prints the manifest digest")
            .to_string();
        digests.push((token, stdout));
    }
    assert_eq!(digests[0].0, digests[1].0, "outputs:\n{}\n{}", digests[0].1, digests[1].1);
}

#[test]
fn seeds_flag_overrides_the_config_list() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = base_config("opd", &[11, 12], 2, 1);
    let path = write_config(dir.path(), &cfg);
    let root = dir.path().join("runs");
    let out = run_bin(
        &[
            "train",
            "--config",
            path.to_str().unwrap(),
            "--out",
            root.to_str().unwrap(),
            "--seeds",
            "21",
        ],
        &[],
    );
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));
    let run = only_run_dir(&root);
    let id = run.file_name().unwrap().to_str().unwrap().to_string();
    assert!(id.contains("-s21-"), "run id: {id}");
}

#[test]
fn multi_seed_train_with_jobs_writes_one_directory_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = base_config("opd", &[11, 12], 2, 1);
    let path = write_config(dir.path(), &cfg);
    let root = dir.path().join("runs");
    let out = run_bin(
        &[
            "train",
            "--config",
            path.to_str().unwrap(),
            "--out",
            root.to_str().unwrap(),
            "--jobs",
            "2",
        ],
        &[],
    );
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));
    let mut ids: Vec<String> = std::fs::read_dir(&root)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    ids.sort();
    assert_eq!(ids.len(), 2, "ids: {ids:?}");
    assert!(ids[0].starts_with("opd-s11-") && ids[1].starts_with("opd-s12-"), "ids: {ids:?}");
}

#[test]
fn environment_variable_sets_the_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = base_config("opd", &[11], 2, 1);
    let path = write_config(dir.path(), &cfg);
    let root = dir.path().join("env-root");
    let out = run_bin(
        &["train", "--config", path.to_str().unwrap()],
        &[("OPDGEO_OUT", root.to_str().unwrap())],
    );
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));
    only_run_dir(&root);
}

#[test]
fn effopd_mode_writes_an_event_log_and_report() {
    let dir = tempfile::tempdir().unwrap();
    // Accelerated runs hold out a 50-prompt validation set, so the task
    // needs a pool bigger than the mod-8 default provides.
    let mut cfg = base_config("effopd", &[11], 4, 2);
    cfg["task"]["modulus"] = serde_json::json!(12);
    cfg["model"]["vocab_size"] = serde_json::json!(15);
    let path = write_config(dir.path(), &cfg);
    let root = dir.path().join("runs");
    let out = run_bin(
        &["train", "--config", path.to_str().unwrap(), "--out", root.to_str().unwrap()],
        &[],
    );
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));

    let run = only_run_dir(&root);
    // Triggers fire at steps 1, 2 and 4.
    let events = std::fs::read_to_string(run.join("events.jsonl")).unwrap();
    assert_eq!(events.lines().count(), 3, "events:\n{events}");
    for line in events.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["t"].as_u64().unwrap().is_power_of_two());
        assert!(v["accepted_k"].as_u64().unwrap() <= 5);
    }
    let validation = std::fs::read_to_string(run.join("metrics/validation.csv")).unwrap();
    assert_eq!(validation.lines().nth(1).unwrap(), "step,validation_score");
    assert_eq!(validation.lines().count(), 2 + 4, "header lines plus one row per step");

    let manifest_before = std::fs::read(run.join("manifest.json")).unwrap();
    let report_out = run_bin(&["effopd-report", "--run", run.to_str().unwrap()], &[]);
    assert_eq!(exit_code(&report_out), 0, "stderr: {}", stderr_of(&report_out));
    let report = read_json(&run.join("effopd-report.json"));
    assert_eq!(report["triggers"], 3);
    assert_eq!(report["seed"], 11);
    assert!(report["acceptance_rate"].is_number());
    assert_eq!(
        report["config_digest"],
        read_json(&run.join("manifest.json"))["config_digest"]
    );
    // Reporting is read-only with respect to the run manifest.
    let manifest_after = std::fs::read(run.join("manifest.json")).unwrap();
    assert_eq!(manifest_before, manifest_after);
}

#[test]
fn effopd_report_rejects_a_plain_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = base_config("opd", &[11], 2, 1);
    let path = write_config(dir.path(), &cfg);
    let root = dir.path().join("runs");
    let out = run_bin(
        &["train", "--config", path.to_str().unwrap(), "--out", root.to_str().unwrap()],
        &[],
    );
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));
    let run = only_run_dir(&root);
    let report_out = run_bin(&["effopd-report", "--run", run.to_str().unwrap()], &[]);
    assert_eq!(exit_code(&report_out), 2, "stderr: {}", stderr_of(&report_out));
}

#[test]
fn analyze_runs_every_analysis_and_registers_tables() {
    let dir = tempfile::tempdir().unwrap();
    // Stride 1 gives the scale analysis an intermediate checkpoint.
    let cfg = base_config("opd", &[11], 4, 1);
    let path = write_config(dir.path(), &cfg);
    let root = dir.path().join("runs");
    let out = run_bin(
        &["train", "--config", path.to_str().unwrap(), "--out", root.to_str().unwrap()],
        &[],
    );
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));
    let run = only_run_dir(&root);

    let analyze_out = run_bin(
        &[
            "analyze",
            "--run",
            run.to_str().unwrap(),
            "--analyses",
            "metrics,align,truncate,scale,sweep",
        ],
        &[],
    );
    assert_eq!(exit_code(&analyze_out), 0, "stderr: {}", stderr_of(&analyze_out));

    let digest_line = |name: &str| {
        let csv = std::fs::read_to_string(run.join("metrics").join(name)).unwrap();
        csv.lines().next().unwrap().to_string()
    };
    let manifest = read_json(&run.join("manifest.json"));
    let digest = manifest["config_digest"].as_str().unwrap();
    let expected_header = format!("# config_digest={digest} seed=11");
    for name in
        ["geometry.csv", "align.csv", "truncate.csv", "scale.csv", "sweep_mlp.csv", "sweep_attn.csv"]
    {
        assert!(run.join("metrics").join(name).is_file(), "missing {name}");
        assert_eq!(digest_line(name), expected_header, "header of {name}");
    }
    // Column schemas of the per-step geometry table.
    let geometry = std::fs::read_to_string(run.join("metrics/geometry.csv")).unwrap();
    assert_eq!(
        geometry.lines().nth(1).unwrap(),
        "step,matrix_name,sigma_max,spec_frob_ratio,effective_rank,top1pct_ratio"
    );

    // All tables are registered in the manifest.
    let registered: Vec<&str> = manifest["metrics"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m["name"].as_str().unwrap())
        .collect();
    for name in ["steps", "geometry", "align", "truncate", "scale", "sweep_mlp", "sweep_attn"] {
        assert!(registered.contains(&name), "manifest metrics: {registered:?}");
    }
}

#[test]
fn analyze_is_idempotent_about_manifest_registration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = base_config("opd", &[11], 3, 1);
    let path = write_config(dir.path(), &cfg);
    let root = dir.path().join("runs");
    let out = run_bin(
        &["train", "--config", path.to_str().unwrap(), "--out", root.to_str().unwrap()],
        &[],
    );
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));
    let run = only_run_dir(&root);
    for _ in 0..2 {
        let a = run_bin(&["analyze", "--run", run.to_str().unwrap(), "--analyses", "align"], &[]);
        assert_eq!(exit_code(&a), 0, "stderr: {}", stderr_of(&a));
    }
    let manifest = read_json(&run.join("manifest.json"));
    let aligned = manifest["metrics"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|m| m["name"] == "align")
        .count();
    assert_eq!(aligned, 1, "re-analysis must replace, not duplicate, the table");
}

#[test]
fn analyze_without_a_selection_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = base_config("opd", &[11], 2, 1);
    let path = write_config(dir.path(), &cfg);
    let root = dir.path().join("runs");
    let out = run_bin(
        &["train", "--config", path.to_str().unwrap(), "--out", root.to_str().unwrap()],
        &[],
    );
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));
    let run = only_run_dir(&root);
    let analyze_out = run_bin(&["analyze", "--run", run.to_str().unwrap()], &[]);
    assert_eq!(exit_code(&analyze_out), 2, "stderr: {}", stderr_of(&analyze_out));
}

#[test]
fn quadsim_subcommand_writes_a_passing_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = serde_json::json!({
        "instances": 4,
        "max_dim": 10,
        "step_counts": [1, 7],
        "lockin_instances": 5,
        "seed": 3
    });
    let path = write_config(dir.path(), &cfg);
    let root = dir.path().join("out");
    let out = run_bin(
        &["quadsim", "--config", path.to_str().unwrap(), "--out", root.to_str().unwrap()],
        &[],
    );
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr_of(&out));
    let report = read_json(&root.join("quadsim-report.json"));
    assert_eq!(report["pass"], true, "report: {report}");
    assert_eq!(report["equivalence"]["failures"], 0);
    assert_eq!(report["lockin"]["violations"], 0);
    assert_eq!(report["eta_guard"]["rejected"], true);
    assert!(report["config_digest"].is_string());
    assert_eq!(report["seed"], 3);
}
