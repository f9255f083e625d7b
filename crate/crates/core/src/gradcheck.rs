//! Finite-difference verification of the analytic loss gradients.

use rand_distr::{Distribution, Normal};

use crate::error::{ensure, Result};
use crate::loss::{dynamic_range, total_loss, total_loss_with_grad, SsimParams};
use crate::network::{build_model, Model, ModelConfig};
use crate::rng;
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Central differences cannot resolve gradients smaller than about
/// `ε·|L|/h`; this factor sets the resolution used to separate such
/// elements (e.g. conv biases feeding batch norm, whose gradient is
/// exactly zero) from the relative comparison.
pub const RESOLUTION_FACTOR: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub loss_weight_ssim: f64,
    /// SSIM window settings; the dynamic range is taken from the batch.
    pub ssim: SsimParams,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            batch: 2,
            height: 8,
            width: 8,
            loss_weight_ssim: 10.0,
            // an 11-px window does not fit an 8×8 input
            ssim: SsimParams {
                window: 7,
                ..SsimParams::default()
            },
            step: FD_STEP,
            seed: 0x6772_6164,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Over elements whose gradient exceeds the resolution.
    pub max_relative_error: f64,
    /// Smallest gradient magnitude finite differences can resolve.
    pub resolution: f64,
    /// Elements below the resolution and the largest absolute error among
    /// them, which must itself stay below the resolution.
    pub unresolved: usize,
    pub max_unresolved_error: f64,
    /// Largest `|a - n|` over all elements.
    pub max_abs_error: f64,
    /// `name[index]` of the worst element.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub elements_checked: usize,
    pub loss: f64,
}

/// `|a - n| / max(|a|, |n|)`, 0 when both vanish.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance && self.max_unresolved_error <= self.resolution
    }
}

/// Noisy input, noise-map target: clean Anscombe-scale signal plus
/// unit-variance noise.
pub fn synthetic_batch(opts: &GradCheckOptions) -> Result<(Tensor, Tensor)> {
    let shape = [opts.batch, 1, opts.height, opts.width];
    let n = shape.iter().product();
    let mut r = rng::stream(opts.seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let clean: Vec<f64> = (0..n).map(|_| 20.0 + 3.0 * unit.sample(&mut r)).collect();
    let noise: Vec<f64> = (0..n).map(|_| unit.sample(&mut r)).collect();
    let noisy = clean.iter().zip(&noise).map(|(c, v)| c + v).collect();
    Ok((Tensor::from_vec(shape, noisy)?, Tensor::from_vec(shape, noise)?))
}

fn clean_of(noisy: &Tensor, v: &Tensor) -> Result<Tensor> {
    noisy.zip_map(v, |y, n| y - n)
}

/// Checks every trainable element of `model` against central differences
/// of the train-mode loss on `(noisy, v)`.
pub fn check_model(model: &Model, noisy: &Tensor, v: &Tensor, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    ensure!(opts.step > 0.0, "finite-difference step must be positive");
    let params = opts.ssim.with_range(dynamic_range(&clean_of(noisy, v)?));
    let w = opts.loss_weight_ssim;

    let mut m = model.clone();
    m.zero_grad();
    let (v_hat, cache) = m.forward_train(noisy)?;
    let (loss, d_out) = total_loss_with_grad(&v_hat, v, noisy, &params, w)?;
    m.backward(&cache, &d_out);
    let analytic: Vec<Vec<f64>> = m.params().iter().map(|p| p.grad.clone()).collect();

    let eval = |m: &mut Model| -> Result<f64> {
        let (out, _) = m.forward_train(noisy)?;
        Ok(total_loss(&out, v, noisy, &params, w)?.total)
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        resolution: RESOLUTION_FACTOR * f64::EPSILON * loss.total.abs().max(1.0) / opts.step,
        unresolved: 0,
        max_unresolved_error: 0.0,
        max_abs_error: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        elements_checked: 0,
        loss: loss.total,
    };
    let mut probe = model.clone();
    for (pi, grads) in analytic.iter().enumerate() {
        for (ei, &a) in grads.iter().enumerate() {
            let orig = probe.params()[pi].value[ei];
            probe.params_mut()[pi].value[ei] = orig + opts.step;
            let plus = eval(&mut probe)?;
            probe.params_mut()[pi].value[ei] = orig - opts.step;
            let minus = eval(&mut probe)?;
            probe.params_mut()[pi].value[ei] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            report.elements_checked += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if a.abs().max(numeric.abs()) <= report.resolution {
                report.unresolved += 1;
                report.max_unresolved_error = report.max_unresolved_error.max((a - numeric).abs());
                continue;
            }
            let err = relative_error(a, numeric);
            if err > report.max_relative_error || report.worst.is_empty() {
                report.max_relative_error = err;
                report.worst = format!("{}[{ei}]", probe.params()[pi].name);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Builds `cfg`, draws a synthetic batch and checks all gradients.
pub fn gradient_check(cfg: &ModelConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let model = build_model(cfg, rng::derive_named(opts.seed, "init"))?;
    let (noisy, v) = synthetic_batch(opts)?;
    check_model(&model, &noisy, &v, opts)
}

/// Config of the tiny network used for gradient checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_blocks: 1,
        channels: 4,
        ..ModelConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{param_count, Arch, NormPlacement, SkipProjection};

    #[test]
    fn tiny_model_is_small() {
        let m = build_model(&tiny_config(), 0).unwrap();
        assert!(param_count(&m) <= 5000);
    }

    #[test]
    fn full_loss_gradients_match() {
        let r = gradient_check(&tiny_config(), &GradCheckOptions::default()).unwrap();
        assert_eq!(r.elements_checked, param_count(&build_model(&tiny_config(), 0).unwrap()));
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn mse_only_gradients_match() {
        let opts = GradCheckOptions {
            loss_weight_ssim: 0.0,
            ..GradCheckOptions::default()
        };
        let r = gradient_check(&tiny_config(), &opts).unwrap();
        assert!(r.passes(1e-4) && r.max_abs_error < 1e-6, "{r:?}");
    }

    #[test]
    fn variants_match() {
        for cfg in [
            ModelConfig {
                skip_projection: SkipProjection::Identity,
                norm_placement: NormPlacement::PerBlock,
                ..tiny_config()
            },
            ModelConfig {
                arch: Arch::PlainCnn,
                plain_depth: 3,
                ..tiny_config()
            },
        ] {
            let r = gradient_check(&cfg, &GradCheckOptions::default()).unwrap();
            assert!(r.passes(1e-4), "{cfg:?}: {r:?}");
        }
    }

    #[test]
    fn input_normalization_gradients_match() {
        // the default batch puts one head pre-activation within a step of
        // the ReLU kink once the input is centred, so use another draw
        let cfg = ModelConfig {
            input_shift: 20.0,
            input_scale: 3.0,
            ..tiny_config()
        };
        let opts = GradCheckOptions {
            seed: 3,
            ..GradCheckOptions::default()
        };
        let r = gradient_check(&cfg, &opts).unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn zero_batch_with_zeroed_tail() {
        let mut m = build_model(&tiny_config(), 1).unwrap();
        m.zero_tail();
        let zeros = Tensor::zeros([2, 1, 8, 8]);
        let opts = GradCheckOptions::default();
        let params = opts.ssim.with_range(dynamic_range(&zeros));
        let (out, cache) = m.forward_train(&zeros).unwrap();
        let (loss, d) = total_loss_with_grad(&out, &zeros, &zeros, &params, 10.0).unwrap();
        assert_eq!(loss.total, 0.0);
        m.backward(&cache, &d);
        assert!(m.tail.conv.bias.grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
    }
}
