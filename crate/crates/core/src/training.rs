//! Training loop: fresh Poisson noise every iteration, combined MSE/SSIM
//! loss on predicted noise maps, Adam updates.
//!
//! Every random choice is drawn from a seed derived from `cfg.seed`:
//! the patch order of epoch `e` from `(seed, SHUFFLE, e)` and the noise of
//! batch slot `b` at step `s` from `(seed, e, s, b)`. Two runs with the same
//! configuration therefore produce bit-identical loss curves, and no patch
//! is ever paired with the same noise realization twice.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::{Dataset, Patch};
use crate::loss::{dynamic_range, mse_loss, ssim, total_loss, total_loss_with_grad, LossValue, SsimParams};
use crate::network::Model;
use crate::noise::{anscombe, augment_pair, GainModel};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::tensor::Tensor;

const SHUFFLE_TAG: u64 = 0x5348_5546;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Dose factor (0.2 = 80% dose reduction).
    pub alpha: f64,
    pub loss_weight_ssim: f64,
    pub seed: u64,
    /// Epochs between checkpoints; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    /// SSIM window settings; the dynamic range is set per batch.
    #[serde(skip)]
    pub ssim: SsimParams,
    /// Cap on validation patches scored each epoch (0 = all).
    pub max_val_patches: usize,
    /// Set the model's input normalization from training-set statistics
    /// before training a fresh model.
    pub calibrate_input: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            epochs: 125,
            batch_size: 32,
            alpha: 0.2,
            loss_weight_ssim: 10.0,
            seed: 0,
            checkpoint_every: 5,
            ssim: SsimParams::default(),
            max_val_patches: 0,
            calibrate_input: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning rate must be positive"
        );
        ensure!(
            self.alpha > 0.0 && self.alpha <= 1.0,
            "alpha must lie in (0, 1], got {}",
            self.alpha
        );
        ensure!(self.epochs >= 1, "epochs must be at least 1");
        ensure!(self.batch_size >= 1, "batch size must be at least 1");
        ensure!(self.loss_weight_ssim >= 0.0, "SSIM loss weight must be non-negative");
        ensure!(
            (0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2),
            "Adam betas must lie in [0, 1)"
        );
        ensure!(self.adam_epsilon > 0.0, "Adam epsilon must be positive");
        self.ssim.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean MSE and SSIM parts of the training loss.
    pub train_mse: f64,
    pub train_ssim: f64,
    pub val_loss: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// `epoch,train_loss,val_loss,val_psnr,val_ssim` rows with
    /// round-trip-exact floats.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_psnr,val_ssim\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{:?}",
                r.epoch, r.train_loss, r.val_loss, r.val_psnr, r.val_ssim
            );
        }
        out
    }
}

/// Mean and standard deviation of the noiseless Anscombe-domain training
/// patches at dose factor `alpha`; a constant set yields scale 1.
pub fn input_statistics(data: &Dataset, gain: &GainModel, alpha: f64) -> Result<(f64, f64)> {
    ensure!(!data.train_patches.is_empty(), "training set has no patches");
    let values: Vec<f64> = data
        .train_patches
        .iter()
        .flat_map(|p| p.pixels.iter().map(|&z| anscombe(alpha * z / gain.k)))
        .collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok((mean, if std > 0.0 { std } else { 1.0 }))
}

/// Noisy inputs, noise-map targets and clean references for one batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub noisy: Tensor,
    pub noise_map: Tensor,
    pub clean: Tensor,
}

/// Simulates a noisy acquisition for each patch with its own seed.
pub fn make_batch(patches: &[&Patch], gain: &GainModel, alpha: f64, seeds: &[u64]) -> Result<Batch> {
    ensure!(!patches.is_empty(), "batch must contain at least one patch");
    let pairs = patches
        .iter()
        .zip(seeds)
        .map(|(p, &s)| augment_pair(&p.to_image()?, gain, alpha, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch {
        noisy: Tensor::stack_planes(pairs.iter().map(|p| p.noisy.pixels()))?,
        noise_map: Tensor::stack_planes(pairs.iter().map(|p| &p.noise_map))?,
        clean: Tensor::stack_planes(pairs.iter().map(|p| p.clean.pixels()))?,
    })
}

/// One optimizer step on `batch`; returns the loss before the update.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &Batch,
    ssim: &SsimParams,
    weight: f64,
) -> Result<LossValue> {
    let params = ssim.with_range(dynamic_range(&batch.clean));
    model.zero_grad();
    let (v_hat, cache) = model.forward_train(&batch.noisy)?;
    let (loss, grad) = total_loss_with_grad(&v_hat, &batch.noise_map, &batch.noisy, &params, weight)?;
    if !loss.total.is_finite() || !grad.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            step: adam.steps_taken() as usize,
            loss: loss.total,
        });
    }
    model.backward(&cache, &grad);
    if let Some(p) = model.params().iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
        return Err(Error::NonFinite {
            layer: 0,
            name: format!("gradient of {}", p.name),
        });
    }
    adam.step(&mut model.params_mut());
    Ok(loss)
}

/// Validation scores in the Anscombe domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationScore {
    pub loss: f64,
    /// PSNR of `noisy - V̂` against the clean image, peak = clean span.
    pub psnr: f64,
    pub ssim: f64,
}

/// Scores `model` (eval mode) on `batch`.
pub fn validate(model: &Model, batch: &Batch, ssim_params: &SsimParams, weight: f64) -> Result<ValidationScore> {
    let range = dynamic_range(&batch.clean);
    let params = ssim_params.with_range(range);
    let v_hat = model.infer(&batch.noisy)?;
    let loss = total_loss(&v_hat, &batch.noise_map, &batch.noisy, &params, weight)?;
    let recon = batch.noisy.zip_map(&v_hat, |y, v| y - v)?;
    let mse = mse_loss(&recon, &batch.clean)?;
    Ok(ValidationScore {
        loss: loss.total,
        psnr: if mse > 0.0 {
            10.0 * (range * range / mse).log10()
        } else {
            f64::INFINITY
        },
        ssim: ssim(&recon, &batch.clean, &params)?,
    })
}

/// Per-step seed for batch slot `slot`.
pub fn noise_seed(seed: u64, epoch: usize, step: usize, slot: usize) -> u64 {
    rng::derive_seed(seed, &[epoch as u64, step as u64, slot as u64])
}

fn validation_batch(data: &Dataset, gain: &GainModel, cfg: &TrainConfig) -> Result<Option<Batch>> {
    if data.val_patches.is_empty() {
        return Ok(None);
    }
    let n = match cfg.max_val_patches {
        0 => data.val_patches.len(),
        m => m.min(data.val_patches.len()),
    };
    let patches: Vec<&Patch> = data.val_patches[..n].iter().collect();
    let base = rng::derive_named(cfg.seed, "validation");
    let seeds: Vec<u64> = (0..n).map(|i| rng::derive_seed(base, &[i as u64])).collect();
    make_batch(&patches, gain, cfg.alpha, &seeds).map(Some)
}

/// Trains `model` for `cfg.epochs` epochs. `on_epoch` sees each finished
/// epoch and the current model (e.g. to write checkpoints).
pub fn train_with<F>(
    mut model: Model,
    data: &Dataset,
    gain: &GainModel,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<(Model, TrainHistory)>
where
    F: FnMut(&EpochRecord, &Model) -> Result<()>,
{
    cfg.validate()?;
    ensure!(!data.train_patches.is_empty(), "training set has no patches");
    let mut adam = Adam::new(cfg.adam());
    let val = validation_batch(data, gain, cfg)?;
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..data.train_patches.len()).collect();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut rng::stream(rng::derive_seed(cfg.seed, &[SHUFFLE_TAG, epoch as u64])));
        let (mut sum, mut sum_mse, mut sum_ssim, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let patches: Vec<&Patch> = chunk.iter().map(|&i| &data.train_patches[i]).collect();
            let seeds: Vec<u64> = (0..chunk.len()).map(|b| noise_seed(cfg.seed, epoch, step, b)).collect();
            let batch = make_batch(&patches, gain, cfg.alpha, &seeds)?;
            let loss = train_step(&mut model, &mut adam, &batch, &cfg.ssim, cfg.loss_weight_ssim)
                .map_err(|e| match e {
                    Error::Diverged { loss, .. } => Error::Diverged { epoch, step, loss },
                    other => other,
                })?;
            sum += loss.total;
            sum_mse += loss.mse;
            sum_ssim += loss.ssim;
            steps += 1;
        }
        let score = match &val {
            Some(b) => validate(&model, b, &cfg.ssim, cfg.loss_weight_ssim)?,
            None => ValidationScore {
                loss: f64::NAN,
                psnr: f64::NAN,
                ssim: f64::NAN,
            },
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: sum / steps as f64,
            train_mse: sum_mse / steps as f64,
            train_ssim: sum_ssim / steps as f64,
            val_loss: score.loss,
            val_psnr: score.psnr,
            val_ssim: score.ssim,
            seconds: started.elapsed().as_secs_f64(),
        };
        history.epochs.push(record);
        on_epoch(&record, &model)?;
    }
    // stale gradients are not part of the trained state
    model.zero_grad();
    Ok((model, history))
}

/// Repeats optimizer steps on one fixed batch (fixed patches, fixed noise)
/// and returns the loss before every step. A model that cannot drive this
/// loss down cannot learn at all.
pub fn overfit_probe(
    model: &mut Model,
    patches: &[&Patch],
    gain: &GainModel,
    cfg: &TrainConfig,
    iterations: usize,
) -> Result<Vec<LossValue>> {
    cfg.validate()?;
    let base = rng::derive_named(cfg.seed, "probe");
    let seeds: Vec<u64> = (0..patches.len()).map(|i| rng::derive_seed(base, &[i as u64])).collect();
    let batch = make_batch(patches, gain, cfg.alpha, &seeds)?;
    let mut adam = Adam::new(cfg.adam());
    (0..iterations)
        .map(|_| train_step(model, &mut adam, &batch, &cfg.ssim, cfg.loss_weight_ssim))
        .collect()
}

/// [`train_with`] without an epoch callback.
pub fn train(model: Model, data: &Dataset, gain: &GainModel, cfg: &TrainConfig) -> Result<(Model, TrainHistory)> {
    train_with(model, data, gain, cfg, |_, _| Ok(()))
}
