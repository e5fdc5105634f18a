use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage, Rgba, RgbaImage};
use walmafa::checkpoint::{load_params, save_params, DType};
use walmafa::model::{ModelConfig, WalMaFa};
use walmafa::FeatureMap;
use walmafa_cli::imageio::{from_rgb8, load_rgb, save_rgb};
use walmafa_cli::infer::{enhance, run_infer, InferOptions};
use walmafa_cli::samples::{darken, scene};
use walmafa_cli::train::{run_train, sidecar, TrainOptions, TrainReport};
use walmafa_cli::Precision;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_walmafa"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// `n` pairs of `size`-square images under `dir/{low,high}`.
fn make_dataset(dir: &Path, n: u64, size: usize) {
    fs::create_dir_all(dir.join("low")).unwrap();
    fs::create_dir_all(dir.join("high")).unwrap();
    for k in 0..n {
        let high = scene(k + 50, size, size);
        save_rgb(&dir.join("high").join(format!("{k}.png")), &high).unwrap();
        save_rgb(&dir.join("low").join(format!("{k}.png")), &darken(&high, k)).unwrap();
    }
}

fn write_config(path: &Path, extra: &str) {
    let text = format!(
        "base_width = 4\nencoder_depths = 1, 1, 1\nssm_state = 2\nsteps = 4\nbatch_size = 2\ncrop_size = 16\neval_every = 2\n{extra}"
    );
    fs::write(path, text).unwrap();
}

fn train(data: &Path, config: &Path, out: PathBuf, seed: u64, precision: Precision) -> TrainReport {
    run_train(&TrainOptions {
        data: data.to_path_buf(),
        config: Some(config.to_path_buf()),
        out,
        seed,
        precision,
        verbose: false,
    })
    .unwrap()
}

#[test]
fn swap_of_identical_pair_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("a.png");
    save_rgb(&img, &scene(3, 24, 30)).unwrap();
    let out = dir.path().join("swap");
    let res = run(&["swap", s(&img), s(&img), "--out", s(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("swap_report.json")).unwrap()).unwrap();
    let variants = report["variants"].as_array().unwrap();
    assert_eq!(variants.len(), 6);
    for v in variants {
        assert_eq!(v["vs_high"]["ssim"].as_f64(), Some(1.0));
        assert_eq!(v["vs_low"]["psnr"].as_f64(), Some(99.0));
        assert!(Path::new(v["ssim_map"].as_str().unwrap()).is_file());
    }
}

#[test]
fn swap_size_mismatch_and_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    save_rgb(&a, &scene(1, 16, 16)).unwrap();
    save_rgb(&b, &scene(1, 16, 18)).unwrap();
    assert_eq!(code(&run(&["swap", s(&a), s(&b), "--out", s(dir.path())])), 1);
    let missing = dir.path().join("nope.png");
    assert_eq!(code(&run(&["swap", s(&a), s(&missing), "--out", s(dir.path())])), 3);
}

#[test]
fn metrics_reports_closed_form_psnr_and_orphans() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    // 51 / 255 = 0.2 exactly, so PSNR = 20 log10(5)
    RgbImage::from_pixel(16, 16, Rgb([100, 100, 100])).save(a.join("x.png")).unwrap();
    RgbImage::from_pixel(16, 16, Rgb([151, 151, 151])).save(b.join("x.png")).unwrap();
    let out = dir.path().join("m");
    let res = run(&["metrics", s(&a), s(&b), "--out", s(&out)]);
    assert_eq!(code(&res), 0);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    let psnr = report["mean_psnr"].as_f64().unwrap();
    assert!((psnr - 20.0 * 5f64.log10()).abs() < 1e-9, "{psnr}");
    assert!(String::from_utf8_lossy(&res.stdout).contains(&format!("{psnr:.3}")));

    RgbImage::from_pixel(16, 16, Rgb([1, 2, 3])).save(a.join("orphan.png")).unwrap();
    let res = run(&["metrics", s(&a), s(&b)]);
    assert_eq!(code(&res), 1);
    assert!(String::from_utf8_lossy(&res.stderr).contains("orphan.png"));

    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert_eq!(code(&run(&["metrics", s(&empty), s(&empty)])), 1);
}

#[test]
fn alpha_is_dropped_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("rgba.png");
    RgbaImage::from_pixel(4, 3, Rgba([10, 20, 30, 40])).save(&p).unwrap();
    let m = load_rgb(&p).unwrap();
    assert_eq!(m.shape(), (3, 4, 3));
    assert_eq!(m.get(0, 0, 2), 30.0 / 255.0);
}

#[test]
fn training_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_dataset(&data, 2, 16);
    let cfg = dir.path().join("t.cfg");
    write_config(&cfg, "");
    let a = train(&data, &cfg, dir.path().join("a"), 9, Precision::F64);
    let b = train(&data, &cfg, dir.path().join("b"), 9, Precision::F64);
    let curve = |r: &TrainReport| r.steps.iter().map(|s| s.losses).collect::<Vec<_>>();
    assert_eq!(curve(&a), curve(&b));
    assert_eq!(
        load_params(&a.best_checkpoint).unwrap(),
        load_params(&b.best_checkpoint).unwrap()
    );
    let c = train(&data, &cfg, dir.path().join("c"), 10, Precision::F64);
    assert_ne!(curve(&a), curve(&c));
}

#[test]
fn zero_lambda_logs_total_equal_to_charbonnier() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_dataset(&data, 2, 16);
    let cfg = dir.path().join("t.cfg");
    write_config(&cfg, "lambda = 0\n");
    let r = train(&data, &cfg, dir.path().join("out"), 1, Precision::F64);
    assert!(r.steps.iter().all(|s| s.losses.total == s.losses.charbonnier));
    assert!(r.evals.iter().all(|e| e.losses.total == e.losses.charbonnier));
}

#[test]
fn single_precision_checkpoints_hold_f32_values() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_dataset(&data, 1, 16);
    let cfg = dir.path().join("t.cfg");
    write_config(&cfg, "");
    let r = train(&data, &cfg, dir.path().join("out"), 2, Precision::F32);
    let params = load_params(&r.last_checkpoint).unwrap();
    for (_, p) in params.iter() {
        assert!(p.data().iter().all(|&v| v == v as f32 as f64));
    }
}

#[test]
fn training_failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_dataset(&data, 1, 16);
    let cfg = dir.path().join("nan.cfg");
    write_config(&cfg, "learning_rate = 1e300\nmin_learning_rate = 1e300\n");
    let res = run(&["train", s(&data), "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&res), 2, "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stderr).contains("numeric error"));

    let bad = dir.path().join("bad.cfg");
    write_config(&bad, "mystery_knob = 3\n");
    assert_eq!(code(&run(&["train", s(&data), "--config", s(&bad)])), 1);

    let empty = dir.path().join("empty");
    fs::create_dir_all(empty.join("low")).unwrap();
    fs::create_dir_all(empty.join("high")).unwrap();
    assert_eq!(code(&run(&["train", s(&empty)])), 1);
    assert_eq!(code(&run(&["train", "--precision", "f16", s(&data)])), 1);
}

fn zero_head_checkpoint(dir: &Path) -> PathBuf {
    let cfg = ModelConfig {
        base_width: 4,
        encoder_depths: [1, 1, 1],
        ssm_state: 2,
        ..ModelConfig::default()
    };
    let params = WalMaFa::new(cfg.clone()).unwrap().init_params(0).unwrap();
    let ckpt = dir.join("zero.ckpt");
    save_params(&params, &ckpt, DType::F64).unwrap();
    cfg.to_key_values().save(sidecar(&ckpt)).unwrap();
    ckpt
}

#[test]
fn zero_head_inference_returns_input() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = zero_head_checkpoint(dir.path());
    let input = dir.path().join("in.png");
    save_rgb(&input, &scene(7, 21, 19)).unwrap();
    let out = dir.path().join("out");
    let res = run(&["infer", s(&ckpt), s(&input), "--out", s(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let a = image::open(&input).unwrap().to_rgb8();
    let b = image::open(out.join("in.png")).unwrap().to_rgb8();
    assert_eq!(a, b);
}

#[test]
fn inference_is_deterministic_and_padding_is_invisible() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = zero_head_checkpoint(dir.path());
    let (model, mut params) = walmafa_cli::infer::load_model(&ckpt, None).unwrap();
    let mut k = 0.0;
    for name in params.names().map(str::to_owned).collect::<Vec<_>>() {
        for v in params.values_mut(&name).unwrap() {
            k += 1.0;
            *v += 0.01 * (k * 0.37f64).sin();
        }
    }
    let image = scene(8, 16, 24);
    let direct = model.forward(&params, &image).unwrap().enhanced;
    assert_eq!(enhance(&model, &params, &image).unwrap(), direct);
    assert_eq!(enhance(&model, &params, &image).unwrap(), direct);

    let input = dir.path().join("in.png");
    save_rgb(&input, &image).unwrap();
    let opts = |out: &str| InferOptions {
        checkpoint: ckpt.clone(),
        inputs: vec![input.clone()],
        out: dir.path().join(out),
        reference: Some(input.clone()),
        config: None,
        precision: Precision::F64,
    };
    let r1 = run_infer(&opts("o1")).unwrap();
    let r2 = run_infer(&opts("o2")).unwrap();
    assert_eq!(fs::read(&r1.images[0].output).unwrap(), fs::read(&r2.images[0].output).unwrap());
    assert_eq!(r1.mean_enhanced.unwrap().psnr, 99.0);
}

#[test]
fn incompatible_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = zero_head_checkpoint(dir.path());
    let input = dir.path().join("in.png");
    save_rgb(&input, &FeatureMap::filled(16, 16, 3, 0.5)).unwrap();
    let wrong = dir.path().join("wrong.cfg");
    fs::write(&wrong, "base_width = 8\nencoder_depths = 1, 1, 1\nssm_state = 2\n").unwrap();
    let res = run(&["infer", s(&ckpt), s(&input), "--config", s(&wrong), "--out", s(dir.path())]);
    assert_eq!(code(&res), 1);
    assert!(String::from_utf8_lossy(&res.stderr).contains("version error"));

    let future = dir.path().join("future.cfg");
    fs::write(&future, "format_version = 99\nbase_width = 4\n").unwrap();
    let res = run(&["infer", s(&ckpt), s(&input), "--config", s(&future), "--out", s(dir.path())]);
    assert_eq!(code(&res), 1);

    let corrupt = dir.path().join("corrupt.ckpt");
    fs::write(&corrupt, b"not a checkpoint").unwrap();
    fs::copy(sidecar(&ckpt), sidecar(&corrupt)).unwrap();
    assert_eq!(code(&run(&["infer", s(&corrupt), s(&input), "--out", s(dir.path())])), 3);
}

#[test]
fn bundled_assets_match_the_generator() {
    let assets = Path::new(env!("CARGO_MANIFEST_DIR")).join("assets");
    let dir = tempfile::tempdir().unwrap();
    walmafa_cli::samples::write_bundle(dir.path()).unwrap();
    for rel in ["pair/low.png", "pair/high.png", "train/low/03.png", "train/high/07.png"] {
        let want = from_rgb8(&image::open(dir.path().join(rel)).unwrap().to_rgb8());
        assert_eq!(load_rgb(&assets.join(rel)).unwrap(), want, "{rel}");
    }
}
