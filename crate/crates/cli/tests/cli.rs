mod common;

use std::path::Path;
use std::process::{Command, Output};

use axum::body::{to_bytes, Body};
use axum::http::Request;
use morphavatar_cli::service::router;
use morphavatar_cli::Avatar;
use serde_json::Value;
use tower::ServiceExt;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_morphavatar"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_subcommand_exits_with_usage() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.bin");
    let out = run(&["render", "--checkpoint", s(&missing), "--template", "t.bin", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn render_matches_service_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, tpl) = common::fixture(dir.path());
    let out_dir = dir.path().join("render");
    let out = run(&[
        "render", "--checkpoint", s(&ck), "--template", s(&tpl), "--out", s(&out_dir), "--width", "16", "--height", "12",
        "--seed", "5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cli_png = std::fs::read(out_dir.join("rgb.png")).unwrap();

    let app = router(Avatar::load(&ck, &tpl).unwrap(), 1);
    let body = serde_json::json!({"width": 16, "height": 12, "seed": 5, "output": "rgb"}).to_string();
    let rt = tokio::runtime::Runtime::new().unwrap();
    let service_png = rt.block_on(async {
        let req = Request::post("/render").body(Body::from(body)).unwrap();
        let resp = app.oneshot(req).await.unwrap();
        assert!(resp.status().is_success());
        to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec()
    });
    assert_eq!(cli_png, service_png);
}

#[test]
fn gen_data_then_eval_ground_truth_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = run(&[
        "gen-data", "--out", s(&data), "--width", "16", "--height", "16", "--train", "1", "--val", "1", "--test", "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let test = data.join("test");
    let out = run(&["eval", "--data", s(&test), "--predictions", s(&test)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let agg = &v["aggregate"];
    assert_eq!(agg["l1"], 0.0);
    assert_eq!(agg["psnr"], 99.0);
    assert_eq!(agg["normal_error"], 0.0);
    assert_eq!(agg["iou"], 1.0);
    assert_eq!(v["frames"].as_array().unwrap().len(), 2);
}

#[test]
fn eval_without_a_source_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(run(&["gen-data", "--out", s(&data), "--width", "8", "--height", "8", "--train", "0", "--val", "0", "--test", "1"])
        .status
        .success());
    let out = run(&["eval", "--data", s(&data.join("test"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let out = run(&["gradcheck", "--seed", "7", "--states", "1", "--rays", "4", "--params", "5"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("surface") && text.contains("mask") && text.contains("flame"));
}

#[test]
fn train_and_animate_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(run(&["gen-data", "--out", s(&data), "--width", "12", "--height", "12", "--train", "2", "--val", "0", "--test", "0"])
        .status
        .success());
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(
        &cfg,
        "rays_per_step = 16\nchunk_size = 8\n[fields]\ngeometry_width = 16\ngeometry_depth = 2\ndeformation_width = 8\ntexture_width = 8\npe_freqs = 2\n[march]\nn_samples = 8\nbound_radius = 1.0\n",
    )
    .unwrap();
    let run_dir = dir.path().join("run");
    let out = run(&["train", "--data", s(&data), "--out", s(&run_dir), "--config", s(&cfg), "--epochs", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run_dir.join("checkpoint.bin").exists());
    assert_eq!(std::fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap().lines().count(), 1);

    let anim = dir.path().join("anim");
    let out = run(&[
        "animate", "--checkpoint", s(&run_dir.join("checkpoint.bin")), "--template", s(&data.join("template.bin")),
        "--out", s(&anim), "--steps", "3", "--from", "-4", "--to", "4", "--width", "8", "--height", "8",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(anim.join("frame_0002.png").exists());
    let sched: Value = serde_json::from_str(&std::fs::read_to_string(anim.join("schedule.json")).unwrap()).unwrap();
    assert_eq!(sched[0]["psi"][0], -4.0);
    assert_eq!(sched[2]["psi"][0], 4.0);
}
