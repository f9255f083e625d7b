use std::path::Path;
use std::process::{Command, Output};

use lowdose::checkpoint::save_checkpoint;
use lowdose::image::{load_image, save_image, ImageFormat};
use lowdose::network::{build_model, ModelConfig};
use lowdose::Image;
use ndarray::Array2;

fn lowdose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lowdose"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = lowdose(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn textured(path: &Path) {
    let px = Array2::from_shape_fn((48, 40), |(r, c)| {
        (900.0 + 300.0 * ((r as f64 * 0.21).sin() + (c as f64 * 0.13).cos())).round()
    });
    save_image(&Image::raw(px, Some(12)).unwrap(), path, ImageFormat::Pgm16).unwrap();
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.pgm");
    textured(&gt);
    let run = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        ok(&["simulate", "--in", s(&gt), "--alpha", "0.2", "--seed", seed, "--out", s(&out)]);
        std::fs::read(out).unwrap()
    };
    let a = run("7", "a.pgm");
    let b = run("7", "b.pgm");
    let c = run("8", "c.pgm");
    assert_eq!(a, b);
    assert_ne!(a, c);
    let noisy = load_image(&dir.path().join("a.pgm"), ImageFormat::Pgm16).unwrap();
    let mean = noisy.pixels().mean().unwrap();
    assert!((mean / 900.0 - 0.2).abs() < 0.02, "mean {mean}");
}

#[test]
fn zeroed_tail_checkpoint_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.pgm");
    let y = dir.path().join("y.pgm");
    let ckpt = dir.path().join("zeroed-tail.ckpt");
    textured(&x);
    let mut model = build_model(
        &ModelConfig {
            num_blocks: 1,
            channels: 4,
            ..ModelConfig::default()
        },
        1,
    )
    .unwrap();
    model.zero_tail();
    save_checkpoint(&model, None, None, &ckpt).unwrap();
    ok(&["denoise", "--checkpoint", s(&ckpt), "--in", s(&x), "--out", s(&y)]);
    let a = load_image(&x, ImageFormat::Pgm16).unwrap();
    let b = load_image(&y, ImageFormat::Pgm16).unwrap();
    assert_eq!(a.pixels(), b.pixels());
}

#[test]
fn train_then_evaluate_reports_all_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        r#"
seed = 11
[phantom]
width = 64
height = 64
calcifications = []
[data]
n_train = 4
n_val = 1
n_test = 2
[data.sampling]
patch_size = 32
per_image = 8
[model]
num_blocks = 1
channels = 8
[train]
epochs = 4
batch_size = 8
learning_rate = 0.003
checkpoint_every = 2
"#,
    )
    .unwrap();
    ok(&["--threads", "1", "train", "--config", s(&cfg)]);
    for f in ["checkpoints/epoch_0002.ckpt", "checkpoints/epoch_0004.ckpt", "checkpoints/final.ckpt"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let history = std::fs::read_to_string(dir.path().join("checkpoints/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 5);
    assert!(history.starts_with("epoch,train_loss,val_loss,val_psnr,val_ssim"));

    let table = ok(&["evaluate", "--config", s(&cfg), "--annotate", "BM3D:35.48::"]);
    assert!(table.contains("BM3D *"));
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let rows: Vec<(String, f64)> = csv
        .lines()
        .skip(1)
        .filter(|l| l.contains("measured"))
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].trim_matches('"').to_string(), f[1].parse().unwrap())
        })
        .collect();
    let names: Vec<&str> = rows.iter().map(|r| r.0.as_str()).collect();
    assert_eq!(names, ["Noisy", "Gaussian", "ResNet"]);
    assert!(rows[1].1 > rows[0].1 && rows[2].1 > rows[0].1, "{rows:?}");
}

#[test]
fn phantom_and_gain_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[phantom]\nwidth = 32\nheight = 32\ncalcifications = []\n[data]\nn_train = 2\nn_val = 1\nn_test = 1\n[data.sampling]\npatch_size = 16\n").unwrap();
    let out = ok(&["phantom", "--config", s(&cfg)]);
    assert!(out.contains("wrote 4 phantoms"));
    assert!(dir.path().join("data/test/test_000.pgm").is_file());

    let flat = dir.path().join("flat.pgm");
    save_image(&Image::raw(Array2::from_elem((200, 200), 2000.0), Some(12)).unwrap(), &flat, ImageFormat::Pgm16).unwrap();
    let noisy = dir.path().join("noisy.pgm");
    ok(&["simulate", "--in", s(&flat), "--alpha", "1", "--seed", "3", "--gain", "1", "--out", s(&noisy)]);
    let out = ok(&["gain-estimate", "--in", s(&noisy), "--roi", "0,0,200,200"]);
    let k: f64 = out.split_whitespace().nth(2).unwrap().parse().unwrap();
    assert!((k - 1.0).abs() < 0.05, "{out}");
}

#[test]
fn usage_and_contract_errors() {
    assert_eq!(lowdose(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(lowdose(&["simulate", "--bogus"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.pgm");
    textured(&gt);
    let out = lowdose(&["simulate", "--in", s(&gt), "--alpha", "1.5", "--out", s(&dir.path().join("o.pgm"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha must lie in (0, 1]"));
    let out = lowdose(&["gain-estimate", "--in", s(&dir.path().join("missing.pgm"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_lists_defaults() {
    for sub in ["phantom", "gain-estimate", "simulate", "train", "denoise", "evaluate"] {
        let help = ok(&[sub, "--help"]);
        assert!(help.contains("--threads"), "{sub}");
        assert!(help.contains("default"), "{sub}");
    }
    let help = ok(&["simulate", "--help"]);
    assert!(help.contains("[default: 0.2]"));
}
