use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lensfuse::generator::GeneratorConfig;
use lensfuse::imaging::Image;
use lensfuse::train::{Checkpoint, TrainConfig};

fn lensfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lensfuse")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn textured(h: usize, w: usize, k: f64) -> Image {
    Image::from_fn(h, w, |y, x, c| {
        0.5 + 0.4 * ((x as f64 * k + c as f64).sin() * (y as f64 * 0.6 * k).cos())
    })
    .unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        generator: GeneratorConfig { width: 8, blocks: 1, upscale: 2 },
        samples_per_epoch: 1,
        pretrain_epochs: 1,
        adv_epochs: 1,
        ..Default::default()
    }
}

fn write_ckpt(dir: &Path) -> PathBuf {
    let p = dir.join("model.bin");
    Checkpoint::fresh(&tiny_config()).unwrap().save(&p).unwrap();
    p
}

#[test]
fn no_arguments_prints_usage() {
    let o = lensfuse(&[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn version_reports_default_config_hash() {
    let o = lensfuse(&["--version"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.starts_with("lensfuse 0.1.0"));
    assert!(out.contains(&TrainConfig::default().hash()));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = lensfuse(&["enhance", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_writes_triplet_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("scene.png");
    textured(64, 96, 0.3).save_png(&src).unwrap();
    let out = dir.path().join("pairs");
    let o = lensfuse(&["simulate", "--in", s(&src), "--seed", "4", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["scene_narrow.png", "scene_wide.png", "scene_gt.png", "scene.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("scene.json")).unwrap()).unwrap();
    assert_eq!(side["seed"], 4);
    let again = dir.path().join("again");
    lensfuse(&["simulate", "--in", s(&src), "--seed", "4", "--out", s(&again)]);
    assert_eq!(std::fs::read(out.join("scene_wide.png")).unwrap(), std::fs::read(again.join("scene_wide.png")).unwrap());
}

#[test]
fn eval_single_pair_prints_one_json_row() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    textured(32, 32, 0.3).save_png(&a).unwrap();
    textured(32, 32, 0.32).save_png(&b).unwrap();
    let o = lensfuse(&["eval", "--pred", s(&a), "--gt", s(&b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let row: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    for k in ["id", "psnr_db", "ssim", "perceptual_distance", "backend"] {
        assert!(row.get(k).is_some(), "missing {k}");
    }
    assert_eq!(row["backend"], "lpips-proxy");

    let o = lensfuse(&["eval", "--pred", s(&a), s(&b), "--gt", s(&b), s(&b), "--csv"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 3);
}

#[test]
fn enhance_writes_output_and_match_dump() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = write_ckpt(dir.path());
    let (n, w) = (dir.path().join("n.png"), dir.path().join("w.png"));
    textured(64, 64, 0.4).save_png(&n).unwrap();
    textured(64, 64, 0.2).save_png(&w).unwrap();
    let (out, dump) = (dir.path().join("out.png"), dir.path().join("matches.json"));
    let o = lensfuse(&["enhance", "--narrow", s(&n), "--wide", s(&w), "--ckpt", s(&ckpt), "--out", s(&out), "--dump-matches", s(&dump)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(Image::open(&out).unwrap().dims(), (128, 128));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&dump).unwrap()).unwrap();
    assert_eq!(report["matches"].as_array().unwrap().len(), 64);
    assert_eq!(report["threshold"], 0.7);
}

#[test]
fn cascade_runs_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = write_ckpt(dir.path());
    for (i, z) in ["5", "3", "1"].iter().enumerate() {
        textured(64, 64, 0.2 + 0.1 * i as f64).save_png(dir.path().join(format!("{z}.png"))).unwrap();
    }
    let stack = dir.path().join("stack.json");
    std::fs::write(&stack, r#"[{"zoom":5,"path":"5.png"},{"zoom":3,"path":"3.png"},{"zoom":1,"path":"1.png"}]"#).unwrap();
    let out = dir.path().join("out.png");
    let o = lensfuse(&["cascade", "--stack", s(&stack), "--ckpt", s(&ckpt), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 2);
    assert_eq!(Image::open(&out).unwrap().dims(), (128, 128));
}

#[test]
fn train_then_resume_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    textured(64, 64, 0.3).save_png(dir.path().join("img.png")).unwrap();
    let manifest = dir.path().join("data.tsv");
    std::fs::write(&manifest, "img\timg.png\n").unwrap();
    let cfg = dir.path().join("train.cfg");
    std::fs::write(&cfg, "width = 8\nblocks = 1\nsamples_per_epoch = 1\npretrain_epochs = 1\nadv_epochs = 1\n").unwrap();
    let run = dir.path().join("run");

    let o = lensfuse(&["train", "--config", s(&cfg), "--data", s(&manifest), "--out", s(&run), "--phase", "pretrain"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = run.join("ckpt_1.bin");
    assert!(ck.exists());

    let o = lensfuse(&["train", "--config", s(&cfg), "--data", s(&manifest), "--out", s(&run), "--resume", s(&ck), "--phase", "adversarial"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run.join("ckpt_2.bin").exists());
    let log = std::fs::read_to_string(run.join("losses.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let plot = dir.path().join("plot.png");
    let smooth = dir.path().join("smooth.csv");
    let o = lensfuse(&["plot-losses", "--log", s(&run.join("losses.csv")), "--out", s(&plot), "--window", "1", "--smoothed-csv", s(&smooth)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(plot.exists());
    assert_eq!(std::fs::read_to_string(&smooth).unwrap().lines().count(), 3);

    std::fs::write(&cfg, "width = 16\nblocks = 1\nsamples_per_epoch = 1\npretrain_epochs = 1\nadv_epochs = 1\n").unwrap();
    let o = lensfuse(&["train", "--config", s(&cfg), "--data", s(&manifest), "--out", s(&run), "--resume", s(&ck)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("hash mismatch"));
}

#[test]
fn errors_are_a_single_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.png");
    let o = lensfuse(&["eval", "--pred", s(&missing), "--gt", s(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "));
    assert!(err.contains("nope.png"));
}
