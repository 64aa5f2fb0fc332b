use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sggan_core::data_io::{load_checkpoint, read_dataset, tile_images};
use sggan_core::Tensor;
use sggan_core::trainer::{evaluate, METRICS_HEADER};

fn sggan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sggan")).args(args).output().expect("run sggan")
}

fn ok(args: &[&str]) -> String {
    let out = sggan(args);
    assert!(out.status.success(), "sggan {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn dataset(dir: &Path) -> PathBuf {
    let path = dir.join("d.sgds");
    ok(&["gen-data", "--per-class", "40", "--noise", "30", "--seed", "3", "--out", p(&path)]);
    path
}

fn train(dir: &Path, data: &Path, name: &str, route: &str) -> PathBuf {
    let out = dir.join(name);
    ok(&[
        "train", "--data", p(data), "--route", route, "--epochs", "1", "--iters-per-epoch", "2", "--batch-size", "8",
        "--labeled-per-class", "4", "--test-per-class", "8", "--seed", "5", "--out", p(&out),
    ]);
    out
}

#[test]
fn gen_data_writes_requested_count() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.sgds");
    let msg = ok(&["gen-data", "--classes", "4", "--per-class", "200", "--out", p(&path)]);
    assert!(msg.contains("800 images"), "{msg}");
    let d = read_dataset(&path).unwrap();
    assert_eq!(d.len(), 800);
    assert_eq!(d.classes, 4);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = sggan(&["train", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(sggan(&["frobnicate"]).status.code(), Some(2));
    let missing = dir.path().join("nope.sgds");
    let out = sggan(&["train", "--data", p(&missing), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let data = dataset(dir.path());
    let out = sggan(&["train", "--data", p(&data), "--threshold", "-1", "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = sggan(&["train", "--data", p(&data), "--supervised-only", "--metric", "l1", "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let run = train(dir.path(), &data, "run", "baby");
    for f in ["manifest.txt", "metrics.csv", "ckpt_baby.sgck", "samples_baby.ppm", "final.sgck"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let manifest = fs::read_to_string(run.join("manifest.txt")).unwrap();
    assert!(manifest.contains("seed=5"), "{manifest}");
    assert!(manifest.contains("labeled_per_class=4"), "{manifest}");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some(METRICS_HEADER));
    assert_eq!(metrics.lines().count(), 3);
}

#[test]
fn identical_runs_match() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let a = train(dir.path(), &data, "a", "baby");
    let b = train(dir.path(), &data, "b", "baby");
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("final.sgck")).unwrap(), fs::read(b.join("final.sgck")).unwrap());
}

#[test]
fn eval_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let run = train(dir.path(), &data, "run", "baby");
    let ckpt = run.join("final.sgck");
    let line = ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&data)]);
    let printed: f64 = line.trim().strip_prefix("accuracy=").unwrap().parse().unwrap();
    let mut state = load_checkpoint(&ckpt).unwrap();
    let images = read_dataset(&data).unwrap().to_images();
    let w = state.cell.scale();
    let want = evaluate(&mut state.cell.d, &images, &state.pools.test, w).unwrap();
    assert_eq!(printed, want);
}

#[test]
fn sample_writes_grid() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let run = train(dir.path(), &data, "run", "baby");
    let out = dir.path().join("s");
    ok(&["sample", "--ckpt", p(&run.join("final.sgck")), "--n", "6", "--cols", "3", "--out", p(&out)]);
    let bytes = fs::read(out.join("samples.ppm")).unwrap();
    let grid = tile_images(&Tensor::zeros(&[6, 3, 16, 16]), 3).unwrap();
    let (h, w) = (grid.shape()[1], grid.shape()[2]);
    let header = format!("P6\n{w} {h}\n255\n");
    assert!(bytes.starts_with(header.as_bytes()));
    assert_eq!(bytes.len(), header.len() + 3 * h * w);
}

#[test]
fn grow_then_infer_then_resume() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let run = train(dir.path(), &data, "run", "baby");
    let grown = dir.path().join("g.sgck");
    let msg = ok(&["grow", "--ckpt", p(&run.join("final.sgck")), "--data", p(&data), "--to", "junior", "--out", p(&grown)]);
    assert!(msg.contains("route baby,junior"), "{msg}");
    let before = load_checkpoint(run.join("final.sgck")).unwrap();
    let after = load_checkpoint(&grown).unwrap();
    assert!(after.cell.d.params.num_trainable_values() > before.cell.d.params.num_trainable_values());

    let inferred = dir.path().join("i.sgck");
    let msg = ok(&["infer-labels", "--ckpt", p(&grown), "--data", p(&data), "--threshold", "0", "--out", p(&inferred)]);
    let st = load_checkpoint(&inferred).unwrap();
    assert!(msg.contains(&format!("latent={}", st.pools.latent.len())), "{msg}");
    assert!(st.pools.unlabeled.is_empty());

    let out = dir.path().join("resumed");
    let msg = ok(&["train", "--resume", p(&grown), "--data", p(&data), "--out", p(&out)]);
    assert!(msg.contains("stage=junior"), "{msg}");
    assert!(out.join("ckpt_junior.sgck").exists());

    let again = sggan(&["grow", "--ckpt", p(&grown), "--data", p(&data), "--to", "baby", "--out", p(&grown)]);
    assert_eq!(again.status.code(), Some(2));
}

#[test]
fn routes_tabulates_each_route() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let out = dir.path().join("routes");
    let table = ok(&[
        "routes", "--data", p(&data), "--epochs", "1", "--iters-per-epoch", "1", "--batch-size", "4",
        "--labeled-per-class", "4", "--test-per-class", "4", "--out", p(&out),
    ]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "route,accuracy,stage_accuracy");
    assert!(lines.len() > 2);
    assert!(out.join("metrics_baby.csv").exists());
    assert!(out.join("routes.csv").exists());
}
