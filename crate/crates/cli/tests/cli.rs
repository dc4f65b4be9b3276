use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nucleo_cli::train::ModelFile;
use nucleo_core::data::{load_png, save_png, write_dots_csv, Dot, Label, Manifest, Raster, SampleEntry};
use nucleo_core::optim::OptimName;
use nucleo_core::{ModelKind, Task};

fn nucleo(args: &[&str]) -> Output {
    nucleo_env(args, None)
}

fn nucleo_env(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_nucleo"));
    cmd.args(args).env_remove("NUCLEO_SEED").env("RUST_LOG", "warn");
    if let Some(s) = seed {
        cmd.env("NUCLEO_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = nucleo(args);
    assert!(out.status.success(), "nucleo {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.clone(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn synth(dir: &Path, task: &str, count: usize, size: usize) -> PathBuf {
    let out = dir.join(format!("{task}-data"));
    ok(&["synth", "--task", task, "--count", &count.to_string(), "--size", &size.to_string(), "--seed", "3", "--out", s(&out)]);
    out.join("manifest.json")
}

fn detection_manifest(dir: &Path, size: usize) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let img = Raster::new(size, size, 1, (0..size * size).map(|i| (i % 251) as u8).collect()).unwrap();
    save_png(&img, &dir.join("big.png")).unwrap();
    write_dots_csv(&[Dot::new(10, 10), Dot::new(250, 300)], &dir.join("big.csv")).unwrap();
    let m = Manifest {
        task: Task::Detection,
        samples: vec![SampleEntry {
            id: "big".into(),
            image: "big.png".into(),
            label: Label::Dots("big.csv".into()),
        }],
    };
    let path = dir.join("manifest.json");
    m.save(&path).unwrap();
    path
}

const TINY_DCRN: [&str; 8] = ["--blocks", "1", "--layers-per-block", "1", "--batch-size", "8", "--split-frac", "0.5"];
const TINY_UNET: [&str; 4] = ["--plan", "1,4,8,4,1", "--batch-size", "4"];

#[test]
fn classification_image_yields_200_patches_and_an_index() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "classification", 1, 64);
    let store = dir.path().join("store");
    ok(&["prepare", "--manifest", s(&manifest), "--store", s(&store), "--seed", "1"]);
    assert_eq!(fs::read_dir(store.join("patches")).unwrap().count(), 200);
    let index: serde_json::Value = serde_json::from_slice(&fs::read(store.join("index.json")).unwrap()).unwrap();
    assert_eq!(index["entries"].as_array().unwrap().len(), 200);
}

#[test]
fn unpadded_detection_grid_gives_25_patches_per_500px_image() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = detection_manifest(&dir.path().join("data"), 500);
    let store = dir.path().join("store");
    let out = ok(&["prepare", "--manifest", s(&manifest), "--store", s(&store), "--pad", "none"]);
    assert!(out.starts_with("25 patches"), "{out}");
    assert_eq!(fs::read_dir(store.join("density")).unwrap().count(), 25);
}

#[test]
fn prepare_is_byte_identical_for_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "classification", 2, 48);
    let run = |name: &str, seed: &str| {
        let store = dir.path().join(name);
        ok(&["prepare", "--manifest", s(&manifest), "--store", s(&store), "--seed", seed, "--patches-per-image", "20"]);
        snapshot(&store).into_iter().map(|(p, b)| (p.strip_prefix(&store).unwrap().to_path_buf(), b)).collect::<Vec<_>>()
    };
    let a = run("a", "5");
    assert_eq!(a, run("b", "5"));
    assert_ne!(a, run("c", "6"));
}

#[test]
fn rerunning_prepare_in_place_replaces_the_store() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "classification", 1, 48);
    let store = dir.path().join("store");
    ok(&["prepare", "--manifest", s(&manifest), "--store", s(&store), "--patches-per-image", "30"]);
    let first = snapshot(&store);
    ok(&["prepare", "--manifest", s(&manifest), "--store", s(&store), "--patches-per-image", "10"]);
    ok(&["prepare", "--manifest", s(&manifest), "--store", s(&store), "--patches-per-image", "30"]);
    assert_eq!(first, snapshot(&store));
}

#[test]
fn synth_honors_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        ok(&["synth", "--task", "detection", "--count", "2", "--size", "48", "--seed", seed, "--out", s(&out)]);
        snapshot(&out).into_iter().map(|(p, b)| (p.strip_prefix(&out).unwrap().to_path_buf(), b)).collect::<Vec<_>>()
    };
    assert_eq!(gen("a", "1"), gen("b", "1"));
    assert_ne!(gen("a", "1"), gen("c", "2"));
}

#[test]
fn task_mismatch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "classification", 1, 48);
    let out = nucleo(&["prepare", "--manifest", s(&manifest), "--store", s(&dir.path().join("st")), "--task", "segmentation"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_keys_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "classification", 1, 48);
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"epochz": 3}"#).unwrap();
    let out = nucleo(&["prepare", "--manifest", s(&manifest), "--store", s(&dir.path().join("st")), "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unreadable_sample_aborts_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "segmentation", 2, 32);
    let gone = dir.path().join("segmentation-data/images/blob0001.png");
    fs::remove_file(&gone).unwrap();
    let out = nucleo(&["prepare", "--manifest", s(&manifest), "--store", s(&dir.path().join("st")), "--patch-size", "32"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("blob0001.png"));
    let missing = nucleo(&["prepare", "--manifest", s(&dir.path().join("nope.json")), "--store", s(&dir.path().join("st"))]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn divergent_training_exits_4_and_keeps_the_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "classification", 4, 32);
    let (store, run) = (dir.path().join("store"), dir.path().join("run"));
    ok(&["prepare", "--manifest", s(&manifest), "--store", s(&store), "--patches-per-image", "4"]);
    let mut args = vec!["train", "--store", s(&store), "--out", s(&run), "--epochs", "3", "--lr", "1e30"];
    args.extend(TINY_DCRN);
    let out = nucleo(&args);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("last.ckpt").is_file());
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("epoch,train_loss,val_loss,metric"));
}

fn trained_classifier(dir: &Path, seed: &str) -> (PathBuf, PathBuf, PathBuf) {
    let manifest = synth(dir, "classification", 4, 32);
    let (store, run) = (dir.join("store"), dir.join(format!("run-{seed}")));
    ok(&["prepare", "--manifest", s(&manifest), "--store", s(&store), "--patches-per-image", "4"]);
    let mut args = vec!["train", "--store", s(&store), "--out", s(&run), "--epochs", "2", "--seed", seed];
    args.extend(TINY_DCRN);
    ok(&args);
    (manifest, store, run)
}

#[test]
fn training_writes_the_run_directory_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, run) = trained_classifier(dir.path(), "7");
    let first = snapshot(&run);
    fs::remove_dir_all(&run).unwrap();
    trained_classifier(dir.path(), "7");
    assert_eq!(first, snapshot(&run));
    let names: Vec<_> = first.iter().map(|(p, _)| p.file_name().unwrap().to_str().unwrap().to_string()).collect();
    assert_eq!(names, ["best.ckpt", "last.ckpt", "metrics.csv", "model.json"]);

    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    for row in csv.lines().skip(1) {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 4);
        assert!(cols.iter().all(|c| !c.is_empty()), "{row}");
    }
    let other = dir.path().join("run-8");
    trained_classifier(dir.path(), "8");
    assert_ne!(fs::read(run.join("last.ckpt")).unwrap(), fs::read(other.join("last.ckpt")).unwrap());
}

#[test]
fn eval_is_pure_and_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, store, run) = trained_classifier(dir.path(), "1");
    let before = snapshot(dir.path());
    let ckpt = run.join("best.ckpt");
    for args in [
        vec!["eval", "--checkpoint", s(&ckpt), "--store", s(&store)],
        vec!["eval", "--checkpoint", s(&ckpt), "--store", s(&store), "--subset", "val"],
        vec!["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest)],
    ] {
        let report: serde_json::Value = serde_json::from_str(&ok(&args)).unwrap();
        assert_eq!(report["task"], "classification");
        let acc = report["accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(report["n_samples"].as_u64().unwrap() > 0);
    }
    assert_eq!(before, snapshot(dir.path()));
}

#[test]
fn checkpoint_and_data_task_must_agree() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, run) = trained_classifier(dir.path(), "1");
    let seg = synth(dir.path(), "segmentation", 1, 32);
    let out = nucleo(&["eval", "--checkpoint", s(&run.join("best.ckpt")), "--manifest", s(&seg)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn classification_predict_writes_probabilities() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _, run) = trained_classifier(dir.path(), "1");
    let image = Manifest::load(&manifest).unwrap().samples[0].image.clone();
    let out = dir.path().join("pred");
    ok(&["predict", "--checkpoint", s(&run.join("best.ckpt")), "--image", s(&image), "--out", s(&out)]);
    let p: serde_json::Value = serde_json::from_slice(&fs::read(out.join("probabilities.json")).unwrap()).unwrap();
    let mean: Vec<f64> = p["mean"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(mean.len(), 4);
    assert!((mean.iter().sum::<f64>() - 1.0).abs() < 1e-5);
}

fn trained_unet(dir: &Path, task: &str) -> PathBuf {
    let manifest = synth(dir, task, 2, 32);
    let (store, run) = (dir.join(format!("{task}-store")), dir.join(format!("{task}-run")));
    ok(&["prepare", "--manifest", s(&manifest), "--store", s(&store), "--patch-size", "16"]);
    let mut args = vec!["train", "--store", s(&store), "--out", s(&run), "--epochs", "1", "--split-frac", "0.5"];
    args.extend(TINY_UNET);
    ok(&args);
    run.join("best.ckpt")
}

#[test]
fn segmentation_predict_matches_input_extent() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_unet(dir.path(), "segmentation");
    let img = Raster::new(37, 23, 3, (0..37 * 23 * 3).map(|i| (i * 7 % 256) as u8).collect()).unwrap();
    let path = dir.path().join("odd.png");
    save_png(&img, &path).unwrap();
    let out = dir.path().join("pred");
    ok(&["predict", "--checkpoint", s(&ckpt), "--image", s(&path), "--out", s(&out)]);
    for f in ["mask.png", "probability.png"] {
        let r = load_png(&out.join(f)).unwrap();
        assert_eq!((r.width, r.height), (37, 23), "{f}");
    }
    let mask = load_png(&out.join("mask.png")).unwrap();
    assert!(mask.data.iter().all(|&v| v == 0 || v == 255));
}

#[test]
fn detection_predict_writes_density_overlay_and_dots() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_unet(dir.path(), "detection");
    let image = dir.path().join("detection-data/images/field0000.png");
    let out = dir.path().join("pred");
    ok(&["predict", "--checkpoint", s(&ckpt), "--image", s(&image), "--out", s(&out)]);
    let overlay = load_png(&out.join("overlay.png")).unwrap();
    assert_eq!((overlay.width, overlay.height, overlay.channels), (32, 32, 3));
    let density = load_png(&out.join("density.png")).unwrap();
    assert_eq!((density.width, density.height), (32, 32));
    let csv = fs::read_to_string(out.join("dots.csv")).unwrap();
    assert!(csv.lines().next().is_some());
}

#[test]
fn detection_manifest_eval_reports_matching_scores() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_unet(dir.path(), "detection");
    let manifest = dir.path().join("detection-data/manifest.json");
    let report: serde_json::Value = serde_json::from_str(&ok(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest)])).unwrap();
    assert_eq!(report["n_samples"], 2);
    assert!(report["mse"].as_f64().unwrap() >= 0.0);
    for k in ["precision", "recall", "f1"] {
        let v = report[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{k} = {v}");
    }
}

#[test]
fn flags_override_file_which_overrides_env_and_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "classification", 2, 32);
    let store = dir.path().join("store");
    ok(&["prepare", "--manifest", s(&manifest), "--store", s(&store), "--patches-per-image", "2"]);
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"epochs": 1, "batch_size": 2, "seed": 11, "optimizer": {"name": "adam", "lr": 0.01}}"#).unwrap();
    let run = dir.path().join("run");
    let mut args = vec!["train", "--store", s(&store), "--out", s(&run), "--config", s(&cfg), "--batch-size", "3"];
    args.extend(&TINY_DCRN[..4]);
    let out = nucleo_env(&args, Some("99"));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mf = ModelFile::load(&run.join("model.json")).unwrap();
    let c = &mf.config;
    assert_eq!((c.epochs, c.batch_size, c.seed), (1, 3, 11));
    assert_eq!((c.optimizer.name, c.optimizer.lr), (OptimName::Adam, 0.01));
    assert_eq!((c.model, c.split_frac, c.patch_size), (ModelKind::Dcrn, 0.8, 32));

    fs::write(&cfg, r#"{"epochs": 1}"#).unwrap();
    let run2 = dir.path().join("run2");
    let mut args = vec!["train", "--store", s(&store), "--out", s(&run2), "--config", s(&cfg)];
    args.extend(&TINY_DCRN[..4]);
    let out = nucleo_env(&args, Some("99"));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let c = ModelFile::load(&run2.join("model.json")).unwrap().config;
    assert_eq!((c.seed, c.batch_size, c.optimizer.name, c.optimizer.lr), (99, 32, OptimName::Sgd, 1e-3));
}

#[test]
fn selftest_passes() {
    let out = ok(&["selftest"]);
    assert!(out.lines().count() > 10);
    assert!(out.lines().all(|l| l.starts_with("ok")), "{out}");
}
