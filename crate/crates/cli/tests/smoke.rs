//! End-to-end smoke test of the command-line pipeline on a tiny dataset.

use std::path::Path;
use std::process::Command;

fn run(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_prompt-attack"))
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
}

#[test]
fn full_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let data = p("data");
    let stage1 = p("stage1.ckpt");
    let model = p("model.ckpt");
    let adv = p("adv");
    let report = p("report.json");
    let words = p("words.csv");

    run(&[
        "synth-gen",
        "--out",
        &data,
        "--set",
        "dataset.identities=4",
        "--set",
        "dataset.cameras=2",
        "--set",
        "dataset.images_per_camera=1",
    ]);
    let train = format!("{data}/train");
    let query = format!("{data}/query");
    assert!(Path::new(&train).is_dir());
    assert!(Path::new(&format!("{data}/attributes.json")).is_file());

    run(&[
        "train-inversion",
        "--data",
        &train,
        "--out",
        &stage1,
        "--set",
        "stage1.epochs=2",
    ]);
    assert!(Path::new(&stage1).is_file());

    run(&[
        "train-attack",
        "--data",
        &train,
        "--model",
        &stage1,
        "--out",
        &model,
        "--set",
        "stage2.epochs=1",
        "--set",
        "stage2.generator=tiny",
    ]);
    assert!(Path::new(&model).is_file());

    run(&["attack", "--data", &query, "--model", &model, "--out", &adv]);
    assert!(Path::new(&format!("{adv}/manifest.json")).is_file());

    run(&["evaluate", "--data", &data, "--model", &model, "--out", &report]);
    assert!(Path::new(&report).is_file());
    let json = std::fs::read_to_string(&report).unwrap();
    assert!(json.contains("mean_drop_rate"), "{json}");

    run(&[
        "interpret",
        "--data",
        &query,
        "--model",
        &model,
        "--out",
        &words,
        "--top",
        "2",
    ]);
    let csv = std::fs::read_to_string(&words).unwrap();
    assert!(csv.lines().count() > 1, "{csv}");
}
