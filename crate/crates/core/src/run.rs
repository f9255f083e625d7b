//! End-to-end pipelines driven by a [`RunConfig`]: data preparation,
//! training with checkpoints, and the method comparison report.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::save_checkpoint;
use crate::config::{RunConfig, SeedLabel};
use crate::error::{ensure, Error, Result};
use crate::eval::{evaluate, gaussian_denoise, EvalOptions, EvalReport, Method, TestCase};
use crate::image::{load_image, save_image, Dataset, Image, ImageFormat};
use crate::network::{build_model, denoise_image, Arch, DenoiseOptions, Model, OutputDomain, Tiling};
use crate::phantom::phantom_series;
use crate::rng;
use crate::training::{input_statistics, train_with, EpochRecord, TrainHistory};

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const GAUSSIAN_ROW: &str = "Gaussian";

const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Report row name of a trained model.
pub fn method_name(arch: Arch) -> &'static str {
    match arch {
        Arch::Resnet => "ResNet",
        Arch::PlainCnn => "PlainCNN",
    }
}

pub fn checkpoint_path(cfg: &RunConfig, epoch: usize) -> PathBuf {
    cfg.paths.checkpoint_dir.join(format!("epoch_{epoch:04}.ckpt"))
}

fn load_dir(dir: &Path) -> Result<Vec<Image>> {
    let mut paths: Vec<(PathBuf, ImageFormat)> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter_map(|p| ImageFormat::from_path(&p).map(|f| (p, f)))
        .collect();
    paths.sort_by(|a, b| a.0.cmp(&b.0));
    ensure!(!paths.is_empty(), "no images in {}", dir.display());
    paths.iter().map(|(p, f)| load_image(p, *f)).collect()
}

/// Images of `split`: read from `data_dir/<split>/` when that directory
/// exists, otherwise generated from the phantom spec.
pub fn split_images(cfg: &RunConfig, split: &str) -> Result<Vec<Image>> {
    let dir = cfg.paths.data_dir.join(split);
    if dir.is_dir() {
        return load_dir(&dir);
    }
    let (n, seed) = match split {
        "train" => (cfg.data.n_train, cfg.derived_seed(SeedLabel::Phantoms)),
        "val" => (cfg.data.n_val, cfg.derived_seed(SeedLabel::Phantoms)),
        "test" => (cfg.data.n_test, cfg.derived_seed(SeedLabel::TestPhantoms)),
        other => return Err(Error::Contract(format!("unknown split '{other}'"))),
    };
    phantom_series(&cfg.phantom, split, n, seed)
}

/// Writes the generated phantoms of every split as 16-bit PGM files.
pub fn write_phantoms(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for split in SPLITS {
        let dir = cfg.paths.data_dir.join(split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let images = match split {
            "test" => phantom_series(&cfg.phantom, split, cfg.data.n_test, cfg.derived_seed(SeedLabel::TestPhantoms))?,
            _ => {
                let n = if split == "train" { cfg.data.n_train } else { cfg.data.n_val };
                phantom_series(&cfg.phantom, split, n, cfg.derived_seed(SeedLabel::Phantoms))?
            }
        };
        for (i, img) in images.iter().enumerate() {
            let path = dir.join(format!("{split}_{i:03}.pgm"));
            save_image(img, &path, ImageFormat::Pgm16)?;
            written.push(path);
        }
    }
    Ok(written)
}

pub fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    Dataset::new(
        split_images(cfg, "train")?,
        split_images(cfg, "val")?,
        &cfg.data.sampling,
        rng::derive_named(cfg.derived_seed(SeedLabel::Phantoms), "split"),
    )
}

/// Held-out full-dose images with simulated reduced-dose acquisitions.
pub fn test_set(cfg: &RunConfig) -> Result<Vec<TestCase>> {
    let gain = cfg.gain()?;
    let noise = cfg.derived_seed(SeedLabel::TestNoise);
    split_images(cfg, "test")?
        .iter()
        .enumerate()
        .map(|(i, img)| TestCase::simulate(img, &gain, cfg.train.alpha, rng::derive_seed(noise, &[i as u64])))
        .collect()
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: TrainHistory,
    pub final_checkpoint: PathBuf,
}

/// Trains a fresh model, writing periodic checkpoints, the final
/// checkpoint and the loss history into the checkpoint directory.
pub fn run_training<F>(cfg: &RunConfig, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord),
{
    cfg.validate()?;
    let dir = &cfg.paths.checkpoint_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data = dataset(cfg)?;
    let tc = cfg.train_config();
    let gain = cfg.gain()?;
    let mut model_cfg = cfg.model;
    if tc.calibrate_input {
        (model_cfg.input_shift, model_cfg.input_scale) = input_statistics(&data, &gain, tc.alpha)?;
    }
    let model = build_model(&model_cfg, cfg.derived_seed(SeedLabel::Init))?;
    let (model, history) = train_with(model, &data, &gain, &tc, |rec, m| {
        on_epoch(rec);
        if tc.checkpoint_every > 0 && rec.epoch % tc.checkpoint_every == 0 {
            save_checkpoint(m, Some(tc.seed), Some(rec.epoch), &checkpoint_path(cfg, rec.epoch))?;
        }
        Ok(())
    })?;
    let final_checkpoint = dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&model, Some(tc.seed), Some(history.epochs.len()), &final_checkpoint)?;
    let hist = dir.join(HISTORY_FILE);
    fs::write(&hist, history.to_csv()).map_err(|e| Error::io(&hist, e))?;
    Ok(TrainOutcome {
        model,
        history,
        final_checkpoint,
    })
}

/// Scores Noisy, Gaussian and (when given) the trained model on the test
/// set.
pub fn run_evaluation(cfg: &RunConfig, model: Option<&Model>) -> Result<EvalReport> {
    let gain = cfg.gain()?;
    let inverse = cfg.eval.inverse;
    let sigma = cfg.eval.gaussian_sigma;
    let mut methods = vec![Method::new(GAUSSIAN_ROW, move |img: &Image| {
        gaussian_denoise(img, &gain, sigma, OutputDomain::Counts, inverse)
    })];
    if let Some(m) = model {
        let opts = DenoiseOptions {
            output_domain: OutputDomain::Counts,
            inverse,
            tiling: Tiling::default(),
        };
        methods.push(Method::new(method_name(m.config().arch), move |img: &Image| {
            denoise_image(m, img, &gain, &opts)
        }));
    }
    let opts = EvalOptions {
        ssim: cfg.ssim.with_range(1.0),
        ..EvalOptions::default()
    };
    evaluate(&methods, &test_set(cfg)?, &opts)
}

/// Writes the aligned table to `path` and the CSV next to it.
pub fn write_report(report: &EvalReport, path: &Path) -> Result<PathBuf> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, report.to_table()).map_err(|e| Error::io(path, e))?;
    let csv = path.with_extension("csv");
    fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    Ok(csv)
}
