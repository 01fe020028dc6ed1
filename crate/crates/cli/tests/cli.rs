use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn img(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_img"))
        .args(args)
        .env_remove("IMG_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("img binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write(path: &Path, value: &Value) -> String {
    fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path.to_str().unwrap().to_owned()
}

fn tiny_spec() -> Value {
    json!({"n_samples": 24, "test_fraction": 0.25, "frames": 12, "d_v": 8, "d_a": 8, "d_q": 4})
}

fn tiny_config() -> Value {
    json!({
        "d": 8, "d_v": 8, "d_a": 8, "d_q": 4, "max_frames": 12, "max_tokens": 8,
        "heads": 2, "conv_kernel": 3, "slots": 2, "slot_iters": 2,
        "epochs": 2, "batch_size": 6,
        "importance": {"warmup_epochs": 1}
    })
}

/// Synthesize a tiny corpus into `dir/data` and return its path.
fn corpus(dir: &Path) -> String {
    let spec = write(&dir.join("spec.json"), &tiny_spec());
    let data = dir.join("data");
    ok(&img(&["synth", "--spec", &spec, "--out", data.to_str().unwrap()]));
    data.to_str().unwrap().to_owned()
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    assert!(Path::new(&data).join("synthetic_spec.json").is_file());

    let cfg = write(&dir.path().join("config.json"), &tiny_config());
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let stdout = ok(&img(&["train", "--config", &cfg, "--data", &data, "--out", run_s]));
    assert!(stdout.contains("trained 2 epochs"), "{stdout}");
    assert!(run.join("checkpoint.safetensors").is_file());

    let report = dir.path().join("eval.json");
    let stdout = ok(&img(&[
        "eval", "--ckpt", run_s, "--data", &data, "--branch", "visual", "--report", report.to_str().unwrap(),
    ]));
    assert!(stdout.contains("mIoU") && stdout.contains("visual"), "{stdout}");
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["count"], 6);

    let sweep = dir.path().join("sweep.json");
    let stdout = ok(&img(&[
        "noise-sweep", "--ckpt", run_s, "--data", &data, "--fractions", "0,0.5,1", "--out", sweep.to_str().unwrap(),
    ]));
    assert_eq!(stdout.lines().count(), 2 + 3, "{stdout}");
    let s: Value = serde_json::from_str(&fs::read_to_string(&sweep).unwrap()).unwrap();
    assert_eq!(s["rows"].as_array().unwrap().len(), 3);

    let svg = dir.path().join("svg");
    let stdout = ok(&img(&["report", "--in", sweep.to_str().unwrap(), "--svg", svg.to_str().unwrap()]));
    assert!(stdout.contains("noise sweep"), "{stdout}");
    for name in ["noise_sweep_importance.svg", "noise_sweep_miou.svg"] {
        let text = fs::read_to_string(svg.join(name)).unwrap();
        assert!(text.starts_with("<svg") && text.contains("<polyline"), "{name}");
    }
    let stdout = ok(&img(&["report", "--in", report.to_str().unwrap(), "--svg", svg.to_str().unwrap()]));
    assert!(stdout.contains("R1@0.7"), "{stdout}");
    assert!(svg.join("recall_curve.svg").is_file());

    // Resuming a finished run is a no-op that keeps the checkpoint loadable.
    let stdout = ok(&img(&["train", "--data", &data, "--out", run_s, "--resume"]));
    assert!(stdout.contains("checkpoint"), "{stdout}");
}

#[test]
fn seed_from_environment_reaches_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let mut cfg = tiny_config();
    cfg["epochs"] = json!(1);
    let cfg = write(&dir.path().join("config.json"), &cfg);
    let run = dir.path().join("run");
    let out = Command::new(env!("CARGO_BIN_EXE_img"))
        .args(["train", "--config", &cfg, "--data", &data, "--out", run.to_str().unwrap()])
        .env("IMG_SEED", "7")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    ok(&out);
    let trainer = img_core::Trainer::load(&run.join("checkpoint.safetensors")).unwrap();
    assert_eq!(trainer.cfg().seed, 7);
}

#[test]
fn invalid_input_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());

    let mut bad = tiny_config();
    bad["heads"] = json!(3);
    let cfg = write(&dir.path().join("bad.json"), &bad);
    let out = img(&["train", "--config", &cfg, "--data", &data, "--out", dir.path().join("a").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let unknown = write(&dir.path().join("unknown.json"), &json!({"not_a_field": 1}));
    let out = img(&["train", "--config", &unknown, "--data", &data, "--out", dir.path().join("b").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    // Default widths do not match the tiny corpus.
    let out = img(&["train", "--data", &data, "--out", dir.path().join("c").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let out = img(&["eval", "--ckpt", "x", "--data", &data, "--branch", "smell"]);
    assert_eq!(out.status.code(), Some(2));

    let out = img(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn divergence_exits_with_3_and_leaves_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let mut cfg = tiny_config();
    cfg["lr"] = json!(1e30);
    let cfg = write(&dir.path().join("config.json"), &cfg);
    let run = dir.path().join("run");
    let out = img(&["train", "--config", &cfg, "--data", &data, "--out", run.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("divergence.json").is_file());
}
