use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use palseg::raster::{load_png, save_png, Raster};
use serde_json::Value;

fn palseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_palseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout_json(o: &Output) -> Value {
    assert_eq!(code(o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

const CALIB: &str = r#"{"center_x": 300, "center_y": 200, "r_inner": 60, "r_outer": 190, "theta_offset": 0, "clockwise": false}"#;

/// Ring image with a gradient so the unfolded output is not constant.
fn annulus(path: &Path) {
    let img = Raster::<u8>::from_fn(600, 400, 3, |x, y, p| {
        p.copy_from_slice(&[(x / 3) as u8, (y / 2) as u8, 90]);
    });
    save_png(&img, path).unwrap();
}

/// A tiny model trained to memorize a 4-image fixture, shared by the tests
/// that need a checkpoint.
struct Trained {
    _dir: tempfile::TempDir,
    data: PathBuf,
    out: PathBuf,
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let out = dir.path().join("run");
        stdout_json(&palseg(&[
            "dataset",
            "synth",
            "--out",
            s(&data),
            "--train",
            "4",
            "--test",
            "0",
            "--width",
            "96",
            "--height",
            "96",
        ]));
        let cfg = dir.path().join("cfg.json");
        write(
            &cfg,
            r#"{"lr_head": 2e-3, "lr_min": 2e-5, "epochs": 200, "batch_size": 4, "augment": false,
                "max_steps": 200, "model": {"num_classes": 3, "decoder_channels": 16,
                "encoder_variant": "tiny-test",
                "edapp": {"in_channels": 128, "branch_channels": 16, "out_channels": 16}}}"#,
        );
        let o = palseg(&[
            "train",
            "--config",
            s(&cfg),
            "--data",
            s(&data),
            "--out",
            s(&out),
        ]);
        let summary = stdout_json(&o);
        assert_eq!(summary["global_step"], 200);
        Trained {
            _dir: dir,
            data,
            out,
        }
    })
}

#[test]
fn help_documents_every_flag() {
    let cases: &[(&[&str], &[&str])] = &[
        (
            &["unfold"],
            &[
                "--calib",
                "--in",
                "--out",
                "--width",
                "--height",
                "--interp",
                "--emit-mask",
            ],
        ),
        (&["dataset", "validate"], &["--root"]),
        (&["train"], &["--config", "--data", "--out", "--resume"]),
        (&["eval"], &["--checkpoint", "--data", "--split"]),
        (
            &["predict"],
            &["--checkpoint", "--image", "--out", "--overlay", "--mask"],
        ),
        (
            &["bench"],
            &["--checkpoint", "--shape", "--runs", "--warmup"],
        ),
    ];
    for (cmd, flags) in cases {
        let mut args = cmd.to_vec();
        args.push("--help");
        let o = palseg(&args);
        assert_eq!(code(&o), 0);
        let help = String::from_utf8_lossy(&o.stdout);
        for f in *flags {
            assert!(help.contains(f), "{cmd:?} help lacks {f}");
        }
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&palseg(&["bench", "--no-such-flag"])), 2);
    assert_eq!(code(&palseg(&["frobnicate"])), 2);
    assert_eq!(
        code(&palseg(&[
            "eval",
            "--checkpoint",
            "x",
            "--data",
            "y",
            "--split",
            "val"
        ])),
        2
    );
    assert_eq!(code(&palseg(&["unfold", "--calib", "c.json"])), 2);
}

#[test]
fn unfold_single_file_and_directory() {
    let dir = tempfile::tempdir().unwrap();
    let calib = dir.path().join("calib.json");
    write(&calib, CALIB);
    let raw = dir.path().join("raw");
    std::fs::create_dir(&raw).unwrap();
    for name in ["a.png", "b.png", "c.png"] {
        annulus(&raw.join(name));
    }

    let one = dir.path().join("one");
    let o = palseg(&[
        "unfold",
        "--calib",
        s(&calib),
        "--in",
        s(&raw.join("a.png")),
        "--out",
        s(&one),
        "--emit-mask",
    ]);
    let report = stdout_json(&o);
    assert_eq!(report["files"].as_array().unwrap().len(), 1);
    let img = load_png(&one.join("a.png")).unwrap();
    assert_eq!((img.width(), img.height(), img.channels()), (2048, 512, 3));
    let mask = load_png(&one.join("a_mask.png")).unwrap();
    assert_eq!(
        (mask.width(), mask.height(), mask.channels()),
        (2048, 512, 1)
    );
    // the ring fits inside the sensor, so nothing is blind
    assert!(mask.data().iter().all(|&v| v == 255));

    let many = dir.path().join("many");
    let o = palseg(&[
        "unfold",
        "--calib",
        s(&calib),
        "--in",
        s(&raw),
        "--out",
        s(&many),
        "--width",
        "256",
        "--height",
        "64",
        "--interp",
        "nearest",
    ]);
    stdout_json(&o);
    let mut names: Vec<String> = std::fs::read_dir(&many)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["a.png", "b.png", "c.png"]);
}

#[test]
fn unfold_rejects_reversed_radii() {
    let dir = tempfile::tempdir().unwrap();
    let calib = dir.path().join("calib.json");
    write(
        &calib,
        &CALIB.replace("\"r_inner\": 60", "\"r_inner\": 250"),
    );
    annulus(&dir.path().join("a.png"));
    let o = palseg(&[
        "unfold",
        "--calib",
        s(&calib),
        "--in",
        s(&dir.path().join("a.png")),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("r_inner") && err.contains("r_outer"), "{err}");
    assert!(!dir.path().join("o").exists());
}

#[test]
fn dataset_validate_reports_problems() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("d");
    stdout_json(&palseg(&[
        "dataset",
        "synth",
        "--out",
        s(&root),
        "--train",
        "2",
        "--test",
        "1",
        "--width",
        "32",
        "--height",
        "32",
    ]));
    let report = stdout_json(&palseg(&["dataset", "validate", "--root", s(&root)]));
    assert_eq!(report["ok"], true);
    assert_eq!(
        (report["num_train"].as_u64(), report["num_test"].as_u64()),
        (Some(2), Some(1))
    );

    let label = root.join("labels").join("0001.png");
    let mut l = load_png(&label).unwrap();
    l.data_mut()[0] = 7;
    save_png(&l, &label).unwrap();
    let o = palseg(&["dataset", "validate", "--root", s(&root)]);
    assert_eq!(code(&o), 1);
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["ok"], false);
    assert_eq!(report["samples"][1]["invalid_values"]["7"], 1);

    std::fs::remove_file(root.join("images").join("0000.png")).unwrap();
    assert_eq!(
        code(&palseg(&["dataset", "validate", "--root", s(&root)])),
        1
    );
}

#[test]
fn training_is_reproducible_and_resume_needs_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    stdout_json(&palseg(&[
        "dataset",
        "synth",
        "--out",
        s(&data),
        "--train",
        "3",
        "--test",
        "1",
        "--width",
        "64",
        "--height",
        "64",
    ]));
    let cfg = dir.path().join("cfg.json");
    write(
        &cfg,
        r#"{"epochs": 2, "batch_size": 2, "crop": [64, 64], "model": {"num_classes": 3, "decoder_channels": 16, "encoder_variant": "tiny-test", "edapp": {"in_channels": 128, "branch_channels": 16, "out_channels": 16}}}"#,
    );

    let fresh = dir.path().join("fresh");
    assert_eq!(
        code(&palseg(&[
            "train",
            "--config",
            s(&cfg),
            "--data",
            s(&data),
            "--out",
            s(&fresh),
            "--resume"
        ])),
        1
    );

    let logs: Vec<Vec<Value>> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            stdout_json(&palseg(&[
                "train",
                "--config",
                s(&cfg),
                "--data",
                s(&data),
                "--out",
                s(&out),
            ]));
            assert!(out.join("best.ckpt").is_file() && out.join("last.ckpt").is_file());
            std::fs::read_to_string(out.join("train_log.jsonl"))
                .unwrap()
                .lines()
                .map(|l| {
                    let mut v: Value = serde_json::from_str(l).unwrap();
                    v.as_object_mut().unwrap().remove("elapsed_s");
                    v
                })
                .collect()
        })
        .collect();
    assert_eq!(logs[0].len(), 2);
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn invalid_training_config_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    stdout_json(&palseg(&[
        "dataset",
        "synth",
        "--out",
        s(&data),
        "--train",
        "1",
        "--test",
        "0",
        "--width",
        "32",
        "--height",
        "32",
    ]));
    let out = dir.path().join("out");
    for bad in [
        r#"{"epochs": 0}"#,
        r#"{"learning_rate": 1}"#,
        r#"{"lr_min": 1.0, "lr_head": 0.1}"#,
    ] {
        let cfg = dir.path().join("cfg.json");
        write(&cfg, bad);
        let o = palseg(&[
            "train",
            "--config",
            s(&cfg),
            "--data",
            s(&data),
            "--out",
            s(&out),
        ]);
        assert_eq!(code(&o), 1, "{bad}");
        assert!(!out.exists(), "{bad} started training");
    }
}

#[test]
fn eval_after_overfitting_scores_high() {
    let t = trained();
    let ck = t.out.join("best.ckpt");
    let report = stdout_json(&palseg(&[
        "eval",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&t.data),
        "--split",
        "train",
    ]));
    let miou = report["mean_iou"].as_f64().unwrap();
    assert!(miou >= 0.95, "mean IoU {miou}");
    assert_eq!(report["per_class"].as_object().map(|m| m.len()), Some(3));
    // the fixture has no test images
    assert_eq!(
        code(&palseg(&[
            "eval",
            "--checkpoint",
            s(&ck),
            "--data",
            s(&t.data)
        ])),
        1
    );
}

#[test]
fn eval_rejects_mismatched_or_corrupt_checkpoints() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    // same images, but a two-class catalog
    let data = dir.path().join("two");
    stdout_json(&palseg(&[
        "dataset",
        "synth",
        "--out",
        s(&data),
        "--train",
        "1",
        "--test",
        "1",
        "--width",
        "32",
        "--height",
        "32",
    ]));
    let manifest = data.join("manifest.json");
    let mut m: Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    m["classes"]["entries"].as_array_mut().unwrap().pop();
    write(&manifest, &m.to_string());
    let o = palseg(&[
        "eval",
        "--checkpoint",
        s(&t.out.join("best.ckpt")),
        "--data",
        s(&data),
    ]);
    assert_eq!(code(&o), 1);

    let bytes = std::fs::read(t.out.join("best.ckpt")).unwrap();
    let broken = dir.path().join("broken.ckpt");
    std::fs::write(&broken, &bytes[..bytes.len() - 100]).unwrap();
    let o = palseg(&[
        "eval",
        "--checkpoint",
        s(&broken),
        "--data",
        s(&t.data),
        "--split",
        "train",
    ]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("integrity"));
}

#[test]
fn predict_writes_colors_and_respects_blind_areas() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let ck = t.out.join("best.ckpt");
    let image = t.data.join("images").join("0000.png");
    let (out, overlay, labels) = (
        dir.path().join("p.png"),
        dir.path().join("o.png"),
        dir.path().join("l.png"),
    );
    let r = stdout_json(&palseg(&[
        "predict",
        "--checkpoint",
        s(&ck),
        "--image",
        s(&image),
        "--out",
        s(&out),
        "--overlay",
        s(&overlay),
        "--labels",
        s(&labels),
    ]));
    assert_eq!(r["blind_pixels"], 0);
    let colors = load_png(&out).unwrap();
    assert_eq!(
        (colors.width(), colors.height(), colors.channels()),
        (96, 96, 3)
    );
    assert!(load_png(&overlay).unwrap().width() == 96);
    let gt = load_png(&t.data.join("labels").join("0000.png")).unwrap();
    let hits = load_png(&labels)
        .unwrap()
        .data()
        .iter()
        .zip(gt.data())
        .filter(|(a, b)| a == b)
        .count();
    assert!(hits as f64 / gt.data().len() as f64 > 0.95);

    let mask = dir.path().join("blind.png");
    save_png(&Raster::<u8>::new(96, 96, 1), &mask).unwrap();
    let r = stdout_json(&palseg(&[
        "predict",
        "--checkpoint",
        s(&ck),
        "--image",
        s(&image),
        "--out",
        s(&out),
        "--mask",
        s(&mask),
    ]));
    assert_eq!(r["blind_pixels"], 96 * 96);
    assert!(load_png(&out).unwrap().data().iter().all(|&v| v == 0));
}

#[test]
fn bench_reports_requested_runs() {
    let t = trained();
    let r = stdout_json(&palseg(&[
        "bench",
        "--checkpoint",
        s(&t.out.join("last.ckpt")),
        "--shape",
        "1,3,64,128",
        "--runs",
        "5",
        "--warmup",
        "1",
    ]));
    assert_eq!(r["runs"], 5);
    assert_eq!(r["input_shape"], serde_json::json!([1, 3, 64, 128]));
    for key in ["mean", "p50", "p95"] {
        assert!(r["latency_ms"][key].as_f64().unwrap() > 0.0);
    }
    assert!(r["fps"].as_f64().unwrap() > 0.0);
    assert!(r["device"].as_str().is_some());
    assert_eq!(
        code(&palseg(&[
            "bench",
            "--model",
            "tiny-test",
            "--shape",
            "1,3,60,64",
            "--runs",
            "1"
        ])),
        1
    );
    assert_eq!(
        code(&palseg(&[
            "bench",
            "--model",
            "tiny-test",
            "--shape",
            "1,3,64",
            "--runs",
            "1"
        ])),
        1
    );
}
