mod common;

use common::*;
use t4t_core::checkpoint::Checkpoint;
use t4t_core::config::{ModelSize, RunConfig};
use t4t_core::Model32;

fn toy_checkpoint(dir: &std::path::Path) -> std::path::PathBuf {
    let cfg = RunConfig::preset(ModelSize::Toy);
    let model = Model32::new(&cfg.model, 3).unwrap();
    let path = dir.join("toy.ckpt");
    Checkpoint::from_model(&model, &cfg.model_snapshot()).save(&path).unwrap();
    path
}

#[test]
fn forty_close_frames_give_two_vibrations() {
    let dir = tempfile::tempdir().unwrap();
    write_frames(dir.path(), &[(Script::Obstacle, 40)]);
    let out = replay_labels(dir.path());
    assert!(out.status.success());
    assert_eq!(events(&stdout_lines(&out)), vec![ev("vibration", None); 2]);
}

#[test]
fn scripted_sequence_keeps_its_order() {
    let dir = tempfile::tempdir().unwrap();
    write_frames(dir.path(), &[(Script::Obstacle, 20), (Script::GlassDoor, 20), (Script::ClearFloor, 20)]);
    let out = replay_labels(dir.path());
    assert!(out.status.success());
    assert_eq!(
        events(&stdout_lines(&out)),
        vec![ev("vibration", None), ev("stuff_speech", Some("glass_door")), ev("direction_speech", Some("forward"))]
    );
}

#[test]
fn empty_directory_gives_an_empty_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("events.jsonl");
    let out = t4t(&["replay", "--frames", dir.path().to_str().unwrap(), "--log", log.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(std::fs::read_to_string(log).unwrap(), "");
}

#[test]
fn frame_without_depth_is_skipped() {
    let dir = tempfile::tempdir().unwrap();
    write_frames(dir.path(), &[(Script::Obstacle, 21)]);
    remove_depth(dir.path(), 5);
    let out = replay_labels(dir.path());
    assert!(out.status.success());
    assert_eq!(events(&stdout_lines(&out)).len(), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("000005"));
}

#[test]
fn partial_cycle_is_flushed_and_thresholds_apply() {
    let dir = tempfile::tempdir().unwrap();
    write_frames(dir.path(), &[(Script::ClearFloor, 25)]);
    let out = replay_labels(dir.path());
    assert_eq!(stdout_lines(&out).len(), 2);
    // a 5 m obstacle threshold turns the clear floor into an obstacle
    let frames = dir.path().to_str().unwrap();
    let out = t4t(&["--theta_obstacle_m", "5", "--cycle_frames", "5", "replay", "--frames", frames]);
    assert_eq!(events(&stdout_lines(&out)), vec![ev("vibration", None); 5]);
    let out = t4t(&["--set", "theta_walkable=1.0", "replay", "--frames", frames]);
    assert!(events(&stdout_lines(&out)).iter().all(|(k, _)| k == "object_speech"));
}

#[test]
fn validation_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().to_str().unwrap();
    for args in [
        vec!["--theta_trans", "1.5", "replay", "--frames", frames],
        vec!["--cycle_frames", "0", "replay", "--frames", frames],
        vec!["--set", "bogus=1", "metrics", "--input", "64"],
        vec!["--model", "huge", "metrics"],
        vec!["metrics", "--input", "100"],
        vec!["replay", "--frames", "/definitely/not/here"],
        vec!["infer", "--checkpoint", "/no/such.ckpt", "--image", "/no/such.ppm"],
        vec!["train", "--data", frames],
        vec!["--model", "toy", "synth", "--out", frames, "--count", "0"],
    ] {
        let out = t4t(&args);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"), "{args:?}");
    }
}

#[test]
fn infer_is_deterministic_and_writes_masks() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = toy_checkpoint(dir.path());
    let data = dir.path().join("data");
    let out = t4t(&["--model", "toy", "synth", "--out", data.to_str().unwrap(), "--count", "1", "--seed", "4"]);
    assert!(out.status.success());
    let image = data.join("000001.ppm");
    let gt = data.join("000001_general.pgm");
    let run = |sub: &str| {
        let masks = dir.path().join(sub);
        let out = t4t(&[
            "infer",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--image",
            image.to_str().unwrap(),
            "--out",
            masks.to_str().unwrap(),
            "--gt-general",
            gt.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let general = std::fs::read(masks.join("000001_general.ppm")).unwrap();
        let trans = std::fs::read(masks.join("000001_trans.ppm")).unwrap();
        (stdout_lines(&out), general, trans)
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    // 13 + 12 class counts and one score line
    assert_eq!(a.0.len(), 26);
    assert!(a.0.last().unwrap().contains("\"miou\""));
}

#[test]
fn export_features_writes_eight_maps() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = toy_checkpoint(dir.path());
    write_frames(dir.path(), &[(Script::ClearFloor, 1)]);
    let out_dir = dir.path().join("features");
    let out = t4t(&[
        "export-features",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        dir.path().join("000001.ppm").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let files: Vec<_> = std::fs::read_dir(&out_dir).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(files.len(), 8);
    assert!(files.iter().all(|p| p.extension().unwrap() == "pgm"));
}

#[test]
fn model_replay_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = toy_checkpoint(dir.path());
    let frames = dir.path().join("frames");
    let out = t4t(&["--model", "toy", "synth", "--out", frames.to_str().unwrap(), "--count", "30"]);
    assert!(out.status.success());
    let run = || {
        let out = t4t(&["replay", "--frames", frames.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        stdout_lines(&out).iter().map(|l| without_timing(l)).collect::<Vec<_>>()
    };
    let a = run();
    assert_eq!(a.len(), 2);
    assert_eq!(a, run());
}

#[test]
fn train_writes_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("m.ckpt");
    let log = dir.path().join("train.jsonl");
    assert!(t4t(&["--model", "toy", "synth", "--out", data.to_str().unwrap(), "--count", "4"]).status.success());
    let out = t4t(&[
        "--model",
        "toy",
        "--set",
        "epochs=2",
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--log",
        log.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 2);
    let loaded = Checkpoint::load(&ckpt).unwrap();
    assert!(loaded.snapshot.contains("tpm.embed_dim = 8"), "{}", loaded.snapshot);
}

#[test]
fn metrics_report_both_variants() {
    let out = t4t(&["--model", "toy", "metrics", "--input", "64", "--jsonl"]);
    assert!(out.status.success());
    let lines = stdout_lines(&out);
    let variants: Vec<String> = lines
        .iter()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["variant"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(variants, ["single", "dual", "overhead"]);
}

#[test]
fn gradcheck_command_passes() {
    let out = t4t(&["gradcheck", "--samples", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(stdout_lines(&out).iter().filter(|l| l.starts_with("PASS")).count() >= 20);
}
