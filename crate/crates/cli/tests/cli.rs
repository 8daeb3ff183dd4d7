use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lesionloc::dataset::{write_manifest, BBox, GrayImage, LabelVector, Sample};
use lesionloc::eval::iou;
use lesionloc::model::{BackboneConfig, ClassifierHead, ModelConfig, ModelState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn lesionloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lesionloc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = lesionloc(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every file under `dir` with its bytes, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let e = e.unwrap().path();
            if e.is_dir() {
                stack.push(e);
            } else {
                out.insert(e.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&e).unwrap());
            }
        }
    }
    out
}

fn gen_small(dir: &Path) {
    ok(&["gen-data", "--n", "60", "--classes", "3", "--image-size", "32", "--seed", "3", "--out", p(dir)]);
}

fn train_small(data: &Path, out: &Path) {
    ok(&[
        "train", "--data", p(data), "--image-size", "32", "--epochs", "2", "--batch-size", "8", "--toggles", "dl,rv",
        "--out", p(out),
    ]);
}

#[test]
fn smoke_path_produces_checkpoints_logs_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    gen_small(&data);
    for f in ["images.csv", "boxes.csv", "classes.txt", "split.json", "run_config.json"] {
        assert!(data.join(f).exists(), "{f}");
    }
    train_small(&data, &run);
    for f in [
        "checkpoints/best.ckpt",
        "checkpoints/last.ckpt",
        "checkpoints/epoch_001.ckpt",
        "logs/train_log.csv",
        "logs/steps.csv",
        "run_config.json",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let ckpt = run.join("checkpoints/best.ckpt");
    let eval = tmp.path().join("eval");
    ok(&["eval-cls", "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&eval)]);
    assert!(eval.join("reports/cls/auc.csv").exists());
    ok(&["eval-loc", "--data", p(&data), "--checkpoint", p(&ckpt), "--T", "0.1,0.3,0.5,0.7", "--folds", "2", "--out", p(&eval)]);
    let csv = std::fs::read_to_string(eval.join("reports/loc/localization.csv")).unwrap();
    let ts: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(ts, ["0.1", "0.3", "0.5", "0.7"], "{csv}");
    ok(&["localize", "--data", p(&data), "--checkpoint", p(&ckpt), "--limit", "2", "--out", p(&eval)]);
    assert!(eval.join("reports/predicted_boxes.csv").exists());
    let out = ok(&["mine-inspect", "--data", p(&data), "--image-size", "32", "--triplets", "5", "--out", p(&eval)]);
    assert!(out.contains("positives"), "{out}");
    assert!(eval.join("reports/mining/pool.csv").exists());
    assert!(!eval.join(".lock").exists());
}

#[test]
fn unknown_flag_prints_usage_and_fails() {
    let out = lesionloc(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_input_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere/data");
    let out = lesionloc(&["train", "--data", p(&missing), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(p(&missing)));

    let ckpt = tmp.path().join("absent.ckpt");
    let data = tmp.path().join("data");
    gen_small(&data);
    let out = lesionloc(&["eval-cls", "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&tmp.path().join("e"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(p(&ckpt)));
}

#[test]
fn locked_output_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join(".lock"), "1").unwrap();
    let out = lesionloc(&["gen-data", "--n", "10", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}

#[test]
fn echoed_config_reproduces_identical_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train_small(&data, &a);
    ok(&["train", "--config", p(&a.join("run_config.json")), "--out", p(&b)]);
    assert_eq!(
        std::fs::read(a.join("logs/train_log.csv")).unwrap(),
        std::fs::read(b.join("logs/train_log.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(a.join("checkpoints/best.ckpt")).unwrap(),
        std::fs::read(b.join("checkpoints/best.ckpt")).unwrap()
    );
    let ckpt = a.join("checkpoints/best.ckpt");
    let (ea, eb) = (tmp.path().join("ea"), tmp.path().join("eb"));
    ok(&["eval-loc", "--data", p(&data), "--checkpoint", p(&ckpt), "--folds", "2", "--out", p(&ea)]);
    ok(&["eval-loc", "--config", p(&ea.join("run_config.json")), "--out", p(&eb)]);
    for f in ["reports/loc/localization.csv", "reports/loc/thresholds.json"] {
        assert_eq!(std::fs::read(ea.join(f)).unwrap(), std::fs::read(eb.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn commands_leave_the_dataset_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data);
    let before = snapshot(&data);
    let run = tmp.path().join("run");
    train_small(&data, &run);
    let ckpt = run.join("checkpoints/last.ckpt");
    ok(&["eval-cls", "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&run)]);
    ok(&["localize", "--data", p(&data), "--checkpoint", p(&ckpt), "--limit", "1", "--out", p(&run)]);
    ok(&["mine-inspect", "--data", p(&data), "--image-size", "32", "--out", p(&run)]);
    assert_eq!(before, snapshot(&data));
}

/// A one-class model whose activation map is the image itself: one 1×1
/// identity convolution feeding a unit head.
fn identity_model(side: usize) -> ModelState {
    let mut cfg = ModelConfig::new(1, BackboneConfig::conv_stack(side, &[], 1));
    cfg.rv_enabled = false;
    let mut state = ModelState::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let layer = &mut state.backbone.layers_mut()[0];
    layer.weight = vec![1.0];
    layer.bias = vec![0.0];
    state.head_global = ClassifierHead::from_parts(1, 1, vec![1.0], vec![0.0]).unwrap();
    state
}

#[test]
fn perfect_map_overlay_boxes_coincide() {
    let side = 32;
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let gt = BBox::new(10.0, 8.0, 12.0, 9.0).unwrap();
    let mut image = GrayImage::zeros(side);
    for y in 8..17 {
        for x in 10..22 {
            image.set(x, y, 0.9);
        }
    }
    let sample = Sample {
        id: "perfect.png".into(),
        image,
        labels: LabelVector::from_indices(1, &[0]).unwrap(),
        patient_id: "p0".into(),
        gt_boxes: vec![(0, gt)],
    };
    write_manifest(&data, &[sample], &["Square".to_string()]).unwrap();
    std::fs::write(data.join("split.json"), r#"{"train": [], "val": [], "test": ["perfect.png"]}"#).unwrap();
    let ckpt = tmp.path().join("identity.ckpt");
    identity_model(side).save(&ckpt).unwrap();
    let out = tmp.path().join("out");
    ok(&[
        "localize", "--data", p(&data), "--checkpoint", p(&ckpt), "--cam-threshold", "0.5", "--out",
        p(&out),
    ]);
    let csv = std::fs::read_to_string(out.join("reports/predicted_boxes.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).expect("one prediction").split(',').collect();
    let num = |i: usize| row[i].parse::<f64>().unwrap();
    let predicted = BBox::new(num(3), num(4), num(5), num(6)).unwrap();
    assert!(iou(&predicted, &gt) >= 0.5, "{predicted:?} vs {gt:?}");
    let png = out.join("overlays/perfect_Square.png");
    let img = image::open(&png).unwrap().to_rgb8();
    assert_eq!(img.width(), side as u32 * 4);
}
