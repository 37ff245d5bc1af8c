use std::path::Path;
use std::process::Command;

use vsr::codec::Ffmpeg;
use vsr::frame::{load_clip, save_clip, BitDepth};
use vsr::networks::ModelConfig;
use vsr::synthetic::{render_clip, ClipSpec};
use vsr::training::TrainConfig;

fn vsr(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_vsr")).args(args).env("RUST_LOG", "warn").output().unwrap();
    assert!(out.status.success(), "vsr {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn degrade_train_eval_infer() {
    if !Ffmpeg::from_env().is_available() {
        eprintln!("skipping: no encoder");
        return;
    }
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let hr_dir = r.join("hr").join("clip0");
    save_clip(&render_clip(&ClipSpec::textured(64, 64, 4), 7, "clip0"), &hr_dir, BitDepth::Eight).unwrap();

    let lr_dir = r.join("lr");
    vsr(&["degrade", "--input", s(&hr_dir), "--output", s(&lr_dir), "--crf", "25"]);
    let lr = load_clip(&lr_dir).unwrap();
    assert_eq!((lr.len(), lr.height(), lr.width()), (4, 16, 16));
    assert!(read_json(&lr_dir.join("run_manifest.json"))["codec_version"].is_string());

    let cfg = TrainConfig {
        crop: 32,
        batch: 1,
        clip_len: 3,
        aug_start_frac: 0.5,
        aug_prob: 1.0,
        model: ModelConfig::tiny(),
        ..TrainConfig::default()
    };
    let cfg_path = r.join("train.json");
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let run = r.join("run");
    vsr(&["train", "--config", s(&cfg_path), "--data", s(&r.join("hr")), "--out", s(&run), "--steps", "2"]);
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let manifest = read_json(&run.join("run_manifest.json"));
    assert_eq!(manifest["command"], "train");
    assert!(manifest["checkpoint_sha256"].as_str().is_some_and(|h| h.len() == 64));

    let ckpt = run.join("checkpoint");
    let report = r.join("eval").join("report.json");
    let csv = r.join("eval").join("report.csv");
    vsr(&[
        "eval", "--model", s(&ckpt), "--data", s(&r.join("hr")), "--crf", "0,25", "--report", s(&report), "--csv", s(&csv),
    ]);
    let rep = read_json(&report);
    for crf in ["0", "25"] {
        assert!(rep["aggregate"][crf]["psnr_y"].as_f64().unwrap().is_finite());
        assert!(rep["per_clip"]["clip0"][crf].is_object());
    }
    let table = std::fs::read_to_string(&csv).unwrap();
    assert!(table.starts_with("crf,channel,clip0,average"));
    assert_eq!(table.lines().count(), 5);

    // inference never touches the encoder
    let outs: Vec<_> = (0..2)
        .map(|i| {
            let o = r.join(format!("sr{i}"));
            let status = Command::new(env!("CARGO_BIN_EXE_vsr"))
                .args(["infer", "--model", s(&ckpt), "--input", s(&lr_dir), "--output", s(&o)])
                .env("VSR_FFMPEG", "/nonexistent/ffmpeg")
                .env("RUST_LOG", "warn")
                .status()
                .unwrap();
            assert!(status.success());
            load_clip(&o).unwrap()
        })
        .collect();
    assert_eq!((outs[0].len(), outs[0].height(), outs[0].width()), (4, 64, 64));
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn missing_encoder_exits_with_code_3() {
    let root = tempfile::tempdir().unwrap();
    let hr = root.path().join("hr");
    save_clip(&render_clip(&ClipSpec::textured(16, 16, 2), 1, "c"), &hr, BitDepth::Eight).unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_vsr"))
        .args(["degrade", "--input", s(&hr), "--output", s(&root.path().join("lr")), "--crf", "25"])
        .env("VSR_FFMPEG", "/nonexistent/ffmpeg")
        .env("RUST_LOG", "off")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn bad_config_exits_with_code_2() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("c.json");
    std::fs::write(&cfg, r#"{"crop": 130}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_vsr"))
        .args(["train", "--config", s(&cfg), "--data", s(root.path()), "--out", s(&root.path().join("o"))])
        .env("RUST_LOG", "off")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("crop"));
}
