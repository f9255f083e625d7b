//! Run configuration: one TOML file covering phantoms, model, training,
//! SSIM settings, evaluation, paths and the global seed.
//!
//! Every stochastic component takes its seed from the global one through
//! [`crate::rng::derive_named`] with a fixed label (see [`SeedLabel`]), so a
//! single value fixes a whole run. Relative paths are resolved against the
//! directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::eval::DEFAULT_GAUSSIAN_SIGMA;
use crate::image::PatchSampling;
use crate::loss::SsimParams;
use crate::network::ModelConfig;
use crate::noise::{GainModel, InverseMode};
use crate::phantom::PhantomSpec;
use crate::rng;
use crate::training::TrainConfig;

/// Labels hashed with the global seed to obtain component seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedLabel {
    Phantoms,
    TestPhantoms,
    TestNoise,
    Init,
    Train,
}

impl SeedLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SeedLabel::Phantoms => "phantoms",
            SeedLabel::TestPhantoms => "test-phantoms",
            SeedLabel::TestNoise => "test-noise",
            SeedLabel::Init => "init",
            SeedLabel::Train => "train",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Detector gain of the simulated acquisitions.
    pub gain: f64,
    pub sampling: PatchSampling,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 20,
            n_val: 5,
            n_test: 10,
            gain: 1.0,
            sampling: PatchSampling::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub gaussian_sigma: f64,
    pub inverse: InverseMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            gaussian_sigma: DEFAULT_GAUSSIAN_SIGMA,
            inverse: InverseMode::Unbiased,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_path: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            checkpoint_dir: "checkpoints".into(),
            report_path: "report.txt".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ssim: SsimParams,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads and validates `path`, resolving relative paths against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.paths.data_dir,
            &mut self.paths.checkpoint_dir,
            &mut self.paths.report_path,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.model.validate()?;
        self.train_config().validate()?;
        ensure!(self.data.n_train >= 1 && self.data.n_val >= 1, "data needs at least one training and one validation image");
        ensure!(self.data.n_test >= 1, "data needs at least one test image");
        ensure!(self.data.gain > 0.0 && self.data.gain.is_finite(), "gain must be positive");
        ensure!(
            self.data.sampling.patch_size <= self.phantom.width.min(self.phantom.height),
            "patch size {} exceeds phantom size {}x{}",
            self.data.sampling.patch_size,
            self.phantom.height,
            self.phantom.width
        );
        ensure!(self.data.sampling.per_image >= 1, "patches per image must be at least 1");
        ensure!(self.eval.gaussian_sigma > 0.0, "Gaussian sigma must be positive");
        for (name, p) in [
            ("data_dir", &self.paths.data_dir),
            ("checkpoint_dir", &self.paths.checkpoint_dir),
            ("report_path", &self.paths.report_path),
        ] {
            ensure!(!p.as_os_str().is_empty(), "path {name} is empty");
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                ensure!(
                    !parent.is_file(),
                    "parent of {name} ({}) is a file",
                    parent.display()
                );
            }
        }
        Ok(())
    }

    pub fn derived_seed(&self, label: SeedLabel) -> u64 {
        rng::derive_named(self.seed, label.as_str())
    }

    pub fn gain(&self) -> Result<GainModel> {
        GainModel::known(self.data.gain)
    }

    /// Training settings with the derived seed and the shared SSIM window.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.derived_seed(SeedLabel::Train),
            ssim: self.ssim,
            ..self.train.clone()
        }
    }
}
