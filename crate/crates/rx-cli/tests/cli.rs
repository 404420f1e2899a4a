//! Tests that drive the compiled `rx` binary the way a user would: spawn
//! it on synthetic recordings, then check exit codes, stdout JSON, and the
//! files it leaves behind.

use std::path::Path;
use std::process::{Command, Output};

use rx_core::geometry::RigidTransform;
use rx_core::pipeline::{
    ExecutionResult, Stage, ENV_BACKEND, ENV_KEYPOINTS, ENV_LLM_ENDPOINT, ENV_QUANTUM, ENV_SEED,
    ENV_TOLERANCE, ENV_VLM_ENDPOINT,
};
use rx_core::synth::{generate_scene, SynthScene};
use rx_core::transport::API_KEY_ENV;
use tempfile::TempDir;

/// The binary under test with every `RX_*` variable cleared, so the ambient
/// environment cannot leak into assertions.
fn rx() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rx"));
    for var in [
        ENV_SEED,
        ENV_KEYPOINTS,
        ENV_QUANTUM,
        ENV_BACKEND,
        ENV_VLM_ENDPOINT,
        ENV_LLM_ENDPOINT,
        ENV_TOLERANCE,
        API_KEY_ENV,
    ] {
        cmd.env_remove(var);
    }
    cmd
}

fn stdout_str(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr_str(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn scene(dir: &Path) -> SynthScene {
    generate_scene(&dir.join("scene"), 8).expect("scene generates")
}

/// An `execute` invocation wired to the scene's script, with the output
/// directory and any extra arguments left to the caller.
fn execute_cmd(scene: &SynthScene, out: &Path) -> Command {
    execute_cmd_for(scene, &scene.command, out)
}

fn execute_cmd_for(scene: &SynthScene, command: &str, out: &Path) -> Command {
    let mut cmd = rx();
    cmd.arg("execute")
        .arg(&scene.manifest_path)
        .arg("--command")
        .arg(command)
        .arg("--live")
        .arg(&scene.live_manifest_path)
        .arg("--out")
        .arg(out)
        .arg("--vlm-script")
        .arg(&scene.script_path)
        .arg("--keypoints")
        .arg(scene.keypoint_count.to_string());
    cmd
}

#[test]
fn demo_runs_end_to_end_and_exports_a_complete_result() {
    let dir = TempDir::new().unwrap();
    let demo_dir = dir.path().join("demo");
    let output = rx()
        .arg("demo")
        .arg("--dir")
        .arg(&demo_dir)
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", stderr_str(&output));

    for name in ["result.json", "result.ply", "result.svg"] {
        assert!(demo_dir.join("out").join(name).exists(), "{name} missing");
    }
    assert!(stdout_str(&output)
        .lines()
        .any(|line| line.ends_with("result.json")));
    assert!(stderr_str(&output).contains("stage timings"));

    let result = ExecutionResult::load(&demo_dir.join("out").join("result.json")).unwrap();
    assert!(result.is_complete());
}

#[test]
fn execute_exports_every_requested_format() {
    let dir = TempDir::new().unwrap();
    let scene = scene(dir.path());
    let out_dir = dir.path().join("out");
    let output = execute_cmd(&scene, &out_dir)
        .arg("--formats")
        .arg("json,ply,svg")
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", stderr_str(&output));
    assert_eq!(stdout_str(&output).lines().count(), 3);

    let result = ExecutionResult::load(&out_dir.join("result.json")).unwrap();
    assert!(result.is_complete());
    assert_eq!(result.command, scene.command);
    assert_eq!(result.heuristic, Some(scene.heuristic));
    assert!(stderr_str(&output).contains("gripper poses"));
}

#[test]
fn a_command_missing_from_the_script_fails_in_retrieval_with_a_partial_result() {
    let dir = TempDir::new().unwrap();
    let scene = scene(dir.path());
    let out_dir = dir.path().join("out");
    // A command the script has no entry for.
    let output = execute_cmd_for(&scene, "polish the moon", &out_dir)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));

    let err = stderr_str(&output);
    assert!(err.contains("retrieval stage failed"), "stderr: {err}");
    assert!(err.contains("partial result written"), "stderr: {err}");

    let partial = ExecutionResult::load(&out_dir.join("result.json")).unwrap();
    assert!(!partial.is_complete());
    assert!(partial.spans.is_none());
    assert_eq!(partial.failure.unwrap().stage, Stage::Retrieval);
}

#[test]
fn usage_and_validation_errors_exit_2() {
    // clap rejects the missing required --command/--live arguments.
    let output = rx().arg("execute").arg("nope.json").output().unwrap();
    assert_eq!(output.status.code(), Some(2));

    let dir = TempDir::new().unwrap();
    let output = rx()
        .arg("ingest")
        .arg(dir.path().join("missing.json"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr_str(&output).contains("error:"));

    let scene = scene(dir.path());
    let output = execute_cmd(&scene, &dir.path().join("out"))
        .arg("--formats")
        .arg("json,hologram")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn eval_retrieval_scores_the_scripted_client_perfectly() {
    let dir = TempDir::new().unwrap();
    let scene = scene(dir.path());
    let output = rx()
        .arg("eval-retrieval")
        .arg(&scene.manifest_path)
        .arg("--annotations")
        .arg(&scene.annotations_path)
        .arg("--vlm-script")
        .arg(&scene.script_path)
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", stderr_str(&output));

    let scores: serde_json::Value = serde_json::from_str(&stdout_str(&output)).unwrap();
    let entry = &scores[&scene.command];
    assert_eq!(entry["precision"], 1.0);
    assert_eq!(entry["recall"], 1.0);
    assert_eq!(entry["matches"], 2);
    assert_eq!(entry["predicted"].as_array().unwrap().len(), 2);
}

#[test]
fn eval_retrieval_scores_unknown_commands_as_zero_recall() {
    let dir = TempDir::new().unwrap();
    let scene = scene(dir.path());
    let annotations = dir.path().join("unknown.json");
    std::fs::write(&annotations, r#"{"polish the moon":[[0.2,1.3]]}"#).unwrap();
    let output = rx()
        .arg("eval-retrieval")
        .arg(&scene.manifest_path)
        .arg("--annotations")
        .arg(&annotations)
        .arg("--vlm-script")
        .arg(&scene.script_path)
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", stderr_str(&output));

    let scores: serde_json::Value = serde_json::from_str(&stdout_str(&output)).unwrap();
    let entry = &scores["polish the moon"];
    // No predictions: precision is undefined, recall is zero.
    assert_eq!(entry["precision"], serde_json::Value::Null);
    assert_eq!(entry["recall"], 0.0);
    assert_eq!(entry["matches"], 0);
}

#[test]
fn stabilize_reports_one_identity_anchored_pose_per_frame() {
    let dir = TempDir::new().unwrap();
    let scene = scene(dir.path());
    let output = rx()
        .arg("stabilize")
        .arg(&scene.manifest_path)
        .arg("--clip")
        .arg("0.2,1.3")
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", stderr_str(&output));

    let rows: Vec<serde_json::Value> = serde_json::from_str(&stdout_str(&output)).unwrap();
    assert_eq!(rows.len(), 12);
    let frames: Vec<u64> = rows.iter().map(|r| r["frame"].as_u64().unwrap()).collect();
    assert_eq!(frames, (2..=13).collect::<Vec<u64>>());
    assert!(rows.iter().all(|r| r["flagged"] == false));
    assert_eq!(
        rows[0]["pose"],
        serde_json::to_value(RigidTransform::identity()).unwrap()
    );
}

#[test]
fn ingest_prints_the_recording_summary() {
    let dir = TempDir::new().unwrap();
    let scene = scene(dir.path());
    let output = rx().arg("ingest").arg(&scene.manifest_path).output().unwrap();
    assert!(output.status.success(), "stderr: {}", stderr_str(&output));

    let summary: serde_json::Value = serde_json::from_str(&stdout_str(&output)).unwrap();
    assert_eq!(summary["frames"], 40);
    assert_eq!(summary["fps"], 10.0);
    assert!(summary["recording_id"]
        .as_str()
        .is_some_and(|id| !id.is_empty()));
}

#[test]
fn export_reproduces_the_original_bytes() {
    let dir = TempDir::new().unwrap();
    let scene = scene(dir.path());
    let out_dir = dir.path().join("out");
    let output = execute_cmd(&scene, &out_dir)
        .arg("--formats")
        .arg("json,ply,svg")
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", stderr_str(&output));

    let again = dir.path().join("again");
    let output = rx()
        .arg("export")
        .arg(out_dir.join("result.json"))
        .arg("--formats")
        .arg("ply,svg")
        .arg("--out")
        .arg(&again)
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", stderr_str(&output));

    for name in ["result.ply", "result.svg"] {
        let original = std::fs::read(out_dir.join(name)).unwrap();
        let reexported = std::fs::read(again.join(name)).unwrap();
        assert_eq!(original, reexported, "{name} differs after re-export");
    }
}

#[test]
fn environment_beats_flags_and_flags_beat_the_config_file() {
    let dir = TempDir::new().unwrap();
    let scene = scene(dir.path());
    let config_path = dir.path().join("config.toml");
    std::fs::write(&config_path, "seed = 7\n").unwrap();

    let run = |env: Option<(&str, &str)>, seed_flag: Option<&str>, out: &Path| {
        let mut cmd = execute_cmd(&scene, out);
        cmd.arg("--config").arg(&config_path);
        if let Some(seed) = seed_flag {
            cmd.arg("--seed").arg(seed);
        }
        if let Some((key, value)) = env {
            cmd.env(key, value);
        }
        let output = cmd.output().unwrap();
        assert!(output.status.success(), "stderr: {}", stderr_str(&output));
        ExecutionResult::load(&out.join("result.json")).unwrap()
    };

    assert_eq!(run(None, None, &dir.path().join("o1")).seed, 7);
    assert_eq!(run(None, Some("9"), &dir.path().join("o2")).seed, 9);
    assert_eq!(
        run(Some((ENV_SEED, "11")), Some("9"), &dir.path().join("o3")).seed,
        11
    );
}
