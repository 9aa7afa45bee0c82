use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dts_core::data::read_tensor;
use serde_json::Value;

const TINY: &[&str] = &[
    "--set",
    "model.patch_size=2",
    "--set",
    "model.stage_dims=[4,8,8,8]",
    "--set",
    "model.stage_depths=[1,1,1,1]",
    "--set",
    "model.num_heads=[1,2,2,2]",
    "--set",
    "model.window_size=2",
    "--set",
    "model.time_dim=8",
    "--set",
    "model.stem_dim=4",
];

fn dts(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dts"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn dts")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = dts(args, cwd);
    assert!(
        out.status.success(),
        "dts {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn tiny_dataset(dir: &Path) {
    ok(
        &[
            "gen-data",
            "--out",
            "d",
            "--n",
            "12",
            "--size",
            "16",
            "--classes",
            "3",
            "--test-frac",
            "0.25",
            "--seed",
            "3",
        ],
        dir,
    );
}

fn losses(runlog: &Path) -> Vec<Value> {
    fs::read_to_string(runlog)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|r| r["kind"] == "step")
        .map(|r| r["losses"].clone())
        .collect()
}

#[test]
fn gen_data_writes_the_requested_count() {
    let tmp = tempfile::tempdir().unwrap();
    ok(
        &[
            "gen-data",
            "--out",
            "d",
            "--n",
            "250",
            "--size",
            "64",
            "--classes",
            "4",
            "--seed",
            "7",
        ],
        tmp.path(),
    );
    let d = tmp.path().join("d");
    assert_eq!(fs::read_dir(d.join("images")).unwrap().count(), 250);
    assert_eq!(fs::read_dir(d.join("labels")).unwrap().count(), 250);
    let meta = json(&d.join("meta.json"));
    assert_eq!(meta["count"], 250);
    assert_eq!(meta["seed"], 7);
    assert_eq!(meta["splits"]["train"].as_array().unwrap().len(), 200);
    assert_eq!(meta["splits"]["test"].as_array().unwrap().len(), 50);
    assert_eq!(meta["phantom"]["size"], 64);

    ok(
        &[
            "gen-data",
            "--out",
            "again",
            "--n",
            "250",
            "--size",
            "64",
            "--classes",
            "4",
            "--seed",
            "7",
        ],
        tmp.path(),
    );
    for name in ["images/0123.dten", "labels/0249.dten", "meta.json"] {
        assert_eq!(
            fs::read(d.join(name)).unwrap(),
            fs::read(tmp.path().join("again").join(name)).unwrap()
        );
    }
}

#[test]
fn oracle_and_background_predictors() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_dataset(tmp.path());
    ok(
        &[
            "eval",
            "--data",
            "d",
            "--predictor",
            "oracle",
            "--out",
            "oracle",
        ],
        tmp.path(),
    );
    let report = json(&tmp.path().join("oracle/report.json"));
    assert_eq!(report["mean_dice"], 1.0);
    assert_eq!(report["num_images"], 3);
    ok(
        &[
            "eval",
            "--data",
            "d",
            "--predictor",
            "background",
            "--split",
            "train",
            "--out",
            "bg",
        ],
        tmp.path(),
    );
    let report = json(&tmp.path().join("bg/report.json"));
    assert_eq!(report["mean_dice"], 0.0);
    assert_eq!(report["num_images"], 9);
}

#[test]
fn invalid_inputs_exit_non_zero_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_dataset(tmp.path());
    let cases: Vec<Vec<&str>> = vec![
        vec![
            "eval",
            "--data",
            "missing",
            "--predictor",
            "oracle",
            "--out",
            "x",
        ],
        vec!["eval", "--data", "d", "--out", "x"],
        vec!["train", "--data", "d", "--out", "x", "--set", "bogus=1"],
        vec![
            "train",
            "--data",
            "d",
            "--out",
            "x",
            "--config",
            "nope.json",
        ],
        vec![
            "train",
            "--data",
            "d",
            "--out",
            "x",
            "--set",
            "warmup_frac=1.5",
        ],
        vec!["smooth", "--data", "d", "--out", "x", "--alpha", "0.7"],
        vec!["pretrain", "--data", "d", "--out", "x", "--weights", "1,2"],
    ];
    for args in cases {
        let out = dts(&args, tmp.path());
        assert!(!out.status.success(), "{args:?} succeeded");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(
            err.starts_with("error: ") && err.len() > 10,
            "{args:?}: {err}"
        );
    }
    fs::write(
        tmp.path().join("cfg.json"),
        r#"{"epochs": 2, "typo_field": 1}"#,
    )
    .unwrap();
    let out = dts(
        &["train", "--data", "d", "--out", "x", "--config", "cfg.json"],
        tmp.path(),
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("typo_field"));
}

#[test]
fn smooth_exports_soft_labels_on_the_simplex() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_dataset(tmp.path());
    ok(
        &[
            "smooth", "--data", "d", "--out", "s", "--k", "1", "--alpha", "0.2",
        ],
        tmp.path(),
    );
    let soft = tmp.path().join("s/soft");
    assert_eq!(fs::read_dir(&soft).unwrap().count(), 12);
    let t = read_tensor(&soft.join("0005.dten"))
        .unwrap()
        .into_f32()
        .unwrap();
    assert_eq!(t.shape(), &[3, 16, 16]);
    for i in 0..16 {
        for j in 0..16 {
            let s: f32 = (0..3).map(|c| t[[c, i, j]]).sum();
            assert!((s - 1.0).abs() < 1e-5);
            let top = (0..3).map(|c| t[[c, i, j]]).fold(0.0, f32::max);
            assert!((top - 0.8).abs() < 1e-6);
        }
    }
    let cfg = json(&tmp.path().join("s/config.json"));
    assert_eq!(cfg["k"], 1);
    assert!(json(&tmp.path().join("s/geometry.json")).is_object());
}

#[test]
fn ablation_runs_pretrain_train_eval_and_sample() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny_dataset(dir);
    let with =
        |base: &[&str]| -> Vec<String> { base.iter().chain(TINY).map(|s| s.to_string()).collect() };
    let run = |args: Vec<String>| ok(&args.iter().map(String::as_str).collect::<Vec<_>>(), dir);

    run(with(&[
        "pretrain",
        "--data",
        "d",
        "--out",
        "ssl",
        "--steps",
        "4",
        "--batch-size",
        "4",
        "--set",
        "proj_dim=8",
        "--set",
        "mask_patch=4",
    ]));
    for f in [
        "ssl/checkpoint/manifest.json",
        "ssl/ssl_log.jsonl",
        "ssl/probe.json",
    ] {
        assert!(dir.join(f).exists(), "{f}");
    }
    assert_eq!(
        fs::read_to_string(dir.join("ssl/ssl_log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    let common = [
        "--data",
        "d",
        "--epochs",
        "2",
        "--batch-size",
        "4",
        "--sampling-steps",
        "3",
        "--seed",
        "5",
    ];
    let full: Vec<&str> = [
        "train",
        "--out",
        "full",
        "--cond-mode",
        "trainable-pretrained",
        "--pretrained",
        "ssl/checkpoint",
    ]
    .into_iter()
    .chain(common)
    .collect();
    run(with(&full));
    let base: Vec<&str> = ["train", "--out", "base", "--knls", "off", "--rba", "off"]
        .into_iter()
        .chain(common)
        .collect();
    run(with(&base));
    let full_cfg = json(&dir.join("full/config.json"));
    let base_cfg = json(&dir.join("base/config.json"));
    assert!(full_cfg["knls"].is_object() && full_cfg["model"]["rba"] == true);
    assert!(base_cfg["knls"].is_null() && base_cfg["model"]["rba"] == false);
    assert_eq!(base_cfg["cond_mode"], "scratch");
    assert_eq!(full_cfg["model"]["image_size"], 16);
    assert_eq!(full_cfg["model"]["num_classes"], 3);
    assert_eq!(losses(&dir.join("full/runlog.jsonl")).len(), 6);
    assert_ne!(
        losses(&dir.join("full/runlog.jsonl")),
        losses(&dir.join("base/runlog.jsonl"))
    );

    let again: Vec<&str> = full
        .iter()
        .map(|&a| if a == "full" { "again" } else { a })
        .collect();
    run(with(&again));
    assert_eq!(
        losses(&dir.join("full/runlog.jsonl")),
        losses(&dir.join("again/runlog.jsonl"))
    );
    assert_eq!(
        json(&dir.join("full/report.json")),
        json(&dir.join("again/report.json"))
    );

    ok(
        &[
            "eval",
            "--data",
            "d",
            "--checkpoint",
            "full/checkpoint",
            "--sampling-steps",
            "3",
            "--out",
            "ev",
        ],
        dir,
    );
    assert_eq!(
        json(&dir.join("ev/report.json")),
        json(&dir.join("full/report.json"))
    );

    ok(
        &[
            "sample",
            "--checkpoint",
            "full/checkpoint",
            "--data",
            "d",
            "--index",
            "4",
            "--sampling-steps",
            "3",
            "--out",
            "smp",
        ],
        dir,
    );
    let probs = read_tensor(&dir.join("smp/probs.dten"))
        .unwrap()
        .into_f32()
        .unwrap();
    assert_eq!(probs.shape(), &[3, 16, 16]);
    let labels = read_tensor(&dir.join("smp/labels.dten"))
        .unwrap()
        .into_u8()
        .unwrap();
    assert_eq!(labels.shape(), &[16, 16]);
    assert!(labels.iter().all(|&l| l < 3));
    for f in ["labels.pgm", "image.pgm"] {
        assert!(fs::read(dir.join("smp").join(f))
            .unwrap()
            .starts_with(b"P5\n16 16\n255\n"));
    }
    ok(
        &[
            "sample",
            "--checkpoint",
            "full/checkpoint",
            "--image",
            "d/images/0004.dten",
            "--sampling-steps",
            "3",
            "--out",
            "smp2",
        ],
        dir,
    );
    assert_eq!(
        fs::read(dir.join("smp/probs.dten")).unwrap(),
        fs::read(dir.join("smp2/probs.dten")).unwrap()
    );
}
