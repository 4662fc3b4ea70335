mod common;

use std::path::Path;
use std::process::{Command, Output};

use featsplat_pipeline::checkpoint::{Checkpoint, PAYLOAD};
use featsplat_pipeline::eval::MetricsReport;

fn featsplat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_featsplat"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_schedule_through_the_command_line() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg_path = root.join("tiny.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&common::tiny_cfg()).unwrap()).unwrap();
    let (cfg, data) = (p(&cfg_path), root.join("data"));
    let (s1, s2, s3) = (root.join("s1"), root.join("s2"), root.join("s3"));

    ok(featsplat(&["synth-data", "--config", cfg, "--out", p(&data)]));
    assert!(data.join("scene_001/cameras.json").exists());

    ok(featsplat(&["train-recon", "--config", cfg, "--set", "schedule.stage1_steps=2", "--data", p(&data), "--out", p(&s1)]));
    let rows = std::fs::read_to_string(s1.join("loss.csv")).unwrap();
    assert_eq!(rows.lines().count(), 3);
    assert_eq!(Checkpoint::read(&s1).unwrap().manifest.stage, "stage1");

    ok(featsplat(&["train-refiner", "--preset", "sd", "--data", p(&data), "--stage1", p(&s1), "--out", p(&s2)]));
    let ck2 = Checkpoint::read(&s2).unwrap();
    assert!(ck2.manifest.config.refiner.enabled);
    // stage 2 leaves the stage-1 backbone as it was
    let ck1 = Checkpoint::read(&s1).unwrap();
    for (n, v) in ck1.values.iter().filter(|(n, _)| n.starts_with("bb.")) {
        assert_eq!(&ck2.values[n], v, "{n}");
    }

    ok(featsplat(&["train-joint", "--preset", "feature_guided_sd", "--data", p(&data), "--ckpt", p(&s2), "--out", p(&s3)]));
    assert!(Checkpoint::read(&s3).unwrap().manifest.config.refiner.guided);

    let png = root.join("view.png");
    ok(featsplat(&["render", "--ckpt", p(&s3), "--data", p(&data), "--scene", "1", "--view", "2", "--out", p(&png)]));
    assert!(png.exists() && root.join("view.refined.png").exists());

    let metrics = root.join("metrics.json");
    ok(featsplat(&["eval", "--ckpt", p(&s3), "--data", p(&data), "--split", "test", "--out", p(&metrics)]));
    let report: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 6);

    let out = ok(featsplat(&["gradcheck", "--config", cfg, "--data", p(&data), "--gaussians", "4"]));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["fraction_within"], 1.0);
    assert!(summary["checked"].as_u64().unwrap() > 0);
}

#[test]
fn contract_and_config_failures_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg_path = root.join("tiny.json");
    std::fs::write(&cfg_path, serde_json::to_string(&common::tiny_cfg()).unwrap()).unwrap();
    let cfg = p(&cfg_path);
    let data = root.join("data");

    assert_eq!(code(&featsplat(&["synth-data", "--config", cfg, "--set", "no.such=1", "--out", p(&data)])), 2);
    assert_eq!(code(&featsplat(&["synth-data", "--config", cfg, "--preset", "huge", "--out", p(&data)])), 2);
    ok(featsplat(&["synth-data", "--config", cfg, "--out", p(&data)]));

    let s1 = root.join("s1");
    ok(featsplat(&["train-recon", "--config", cfg, "--set", "schedule.stage1_steps=1", "--data", p(&data), "--out", p(&s1)]));
    // refiner training without a refiner
    let o = featsplat(&["train-refiner", "--preset", "dd_dpm", "--data", p(&data), "--stage1", p(&s1), "--out", p(&root.join("x"))]);
    assert_eq!(code(&o), 2);
    // a scene that does not exist
    let o = featsplat(&["render", "--ckpt", p(&s1), "--data", p(&data), "--scene", "9", "--out", p(&root.join("a.png"))]);
    assert_eq!(code(&o), 2);
    // tampered payload
    let payload = s1.join(PAYLOAD);
    let mut bytes = std::fs::read(&payload).unwrap();
    bytes[0] ^= 0x40;
    std::fs::write(&payload, bytes).unwrap();
    let o = featsplat(&["eval", "--ckpt", p(&s1), "--data", p(&data)]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("hash"));
}

#[test]
fn numeric_failure_exits_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg_path = root.join("tiny.json");
    std::fs::write(&cfg_path, serde_json::to_string(&common::tiny_cfg()).unwrap()).unwrap();
    let cfg = p(&cfg_path);
    let data = root.join("data");
    ok(featsplat(&["synth-data", "--config", cfg, "--out", p(&data)]));
    let o = featsplat(&[
        "train-recon", "--config", cfg, "--set", "optim.lr_backbone=1e30", "--set", "schedule.stage1_steps=10",
        "--data", p(&data), "--out", p(&root.join("s1")),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("step "));
}

#[test]
fn missing_files_exit_with_1() {
    let tmp = tempfile::tempdir().unwrap();
    let o = featsplat(&["eval", "--ckpt", p(&tmp.path().join("none")), "--data", p(tmp.path())]);
    assert_eq!(code(&o), 1);
}
