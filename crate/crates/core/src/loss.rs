//! MSE, SSIM and the combined `MSE + w·(1 − SSIM)` training loss, each with
//! its analytic gradient.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// SSIM window and stabilizing constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimParams {
    /// Side of the square Gaussian window.
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range `L` of the compared signals.
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn with_range(self, dynamic_range: f64) -> Self {
        Self {
            dynamic_range,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.window >= 1, "SSIM window must be positive");
        ensure!(self.sigma > 0.0, "SSIM sigma must be positive");
        ensure!(self.k1 > 0.0 && self.k2 > 0.0, "SSIM constants must be positive");
        ensure!(
            self.dynamic_range > 0.0 && self.dynamic_range.is_finite(),
            "SSIM dynamic range must be positive, got {}",
            self.dynamic_range
        );
        Ok(())
    }

    /// 1D window weights; their outer product sums to 1.
    pub fn weights(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let mut g: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        g.iter_mut().for_each(|v| *v /= s);
        g
    }

    fn constants(&self) -> (f64, f64) {
        (
            (self.k1 * self.dynamic_range).powi(2),
            (self.k2 * self.dynamic_range).powi(2),
        )
    }
}

/// Mean of squared differences.
pub fn mse_loss(predicted: &Tensor, target: &Tensor) -> Result<f64> {
    ensure!(
        predicted.shape() == target.shape(),
        "MSE shape mismatch: {:?} vs {:?}",
        predicted.shape(),
        target.shape()
    );
    let n = predicted.len() as f64;
    Ok(predicted
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n)
}

/// `∂MSE/∂predicted`.
pub fn mse_grad(predicted: &Tensor, target: &Tensor) -> Result<Tensor> {
    let n = predicted.len() as f64;
    predicted.zip_map(target, |a, b| 2.0 * (a - b) / n)
}

/// Windowed correlation over all positions where the window fits.
fn filter_valid(x: &Array2<f64>, g: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for r in 0..h {
        for c in 0..ow {
            rows[[r, c]] = g.iter().enumerate().map(|(j, gv)| gv * x[[r, c + j]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for r in 0..oh {
        for c in 0..ow {
            out[[r, c]] = g.iter().enumerate().map(|(j, gv)| gv * rows[[r + j, c]]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: spreads a valid-position map back over the
/// full `(h, w)` grid.
fn filter_valid_adjoint(m: &Array2<f64>, g: &[f64], h: usize, w: usize) -> Array2<f64> {
    let (oh, ow) = m.dim();
    let mut rows = Array2::<f64>::zeros((h, ow));
    for r in 0..oh {
        for c in 0..ow {
            let v = m[[r, c]];
            for (j, gv) in g.iter().enumerate() {
                rows[[r + j, c]] += gv * v;
            }
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..ow {
            let v = rows[[r, c]];
            for (j, gv) in g.iter().enumerate() {
                out[[r, c + j]] += gv * v;
            }
        }
    }
    out
}

/// Local SSIM index at every valid window position.
pub fn ssim_map(x: &Array2<f64>, y: &Array2<f64>, params: &SsimParams) -> Array2<f64> {
    let g = params.weights();
    let (c1, c2) = params.constants();
    let mx = filter_valid(x, &g);
    let my = filter_valid(y, &g);
    let mxx = filter_valid(&(x * x), &g);
    let myy = filter_valid(&(y * y), &g);
    let mxy = filter_valid(&(x * y), &g);
    Array2::from_shape_fn(mx.dim(), |at| {
        let (ux, uy) = (mx[at], my[at]);
        let (sxx, syy, sxy) = (mxx[at] - ux * ux, myy[at] - uy * uy, mxy[at] - ux * uy);
        (2.0 * ux * uy + c1) * (2.0 * sxy + c2) / ((ux * ux + uy * uy + c1) * (sxx + syy + c2))
    })
}

/// Mean SSIM of one image pair and, optionally, its gradient w.r.t. `x`.
fn ssim_plane(x: &Array2<f64>, y: &Array2<f64>, params: &SsimParams, with_grad: bool) -> (f64, usize, Option<Array2<f64>>) {
    let g = params.weights();
    let (c1, c2) = params.constants();
    let (h, w) = x.dim();
    let mx = filter_valid(x, &g);
    let my = filter_valid(y, &g);
    let mxx = filter_valid(&(x * x), &g);
    let myy = filter_valid(&(y * y), &g);
    let mxy = filter_valid(&(x * y), &g);
    let positions = mx.len();
    let (oh, ow) = mx.dim();
    let mut total = 0.0;
    let (mut d1, mut d2, mut d12) = if with_grad {
        (
            Array2::<f64>::zeros((oh, ow)),
            Array2::<f64>::zeros((oh, ow)),
            Array2::<f64>::zeros((oh, ow)),
        )
    } else {
        (Array2::zeros((0, 0)), Array2::zeros((0, 0)), Array2::zeros((0, 0)))
    };
    for ((i, j), &ux) in mx.indexed_iter() {
        let uy = my[[i, j]];
        let sxx = mxx[[i, j]] - ux * ux;
        let syy = myy[[i, j]] - uy * uy;
        let sxy = mxy[[i, j]] - ux * uy;
        let a1 = 2.0 * ux * uy + c1;
        let a2 = 2.0 * sxy + c2;
        let b1 = ux * ux + uy * uy + c1;
        let b2 = sxx + syy + c2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if with_grad {
            // partials w.r.t. the local moments E[x], E[x²], E[xy]
            let ds_dux = 2.0 * uy * a2 / (b1 * b2) - 2.0 * ux * s / b1;
            let ds_dsxx = -s / b2;
            let ds_dsxy = 2.0 * a1 / (b1 * b2);
            d1[[i, j]] = ds_dux - 2.0 * ux * ds_dsxx - uy * ds_dsxy;
            d2[[i, j]] = ds_dsxx;
            d12[[i, j]] = ds_dsxy;
        }
    }
    let grad = with_grad.then(|| {
        let g1 = filter_valid_adjoint(&d1, &g, h, w);
        let g2 = filter_valid_adjoint(&d2, &g, h, w);
        let g12 = filter_valid_adjoint(&d12, &g, h, w);
        Array2::from_shape_fn((h, w), |(r, c)| {
            g1[[r, c]] + 2.0 * x[[r, c]] * g2[[r, c]] + y[[r, c]] * g12[[r, c]]
        })
    });
    (total, positions, grad)
}

fn check_ssim_inputs(x: &Tensor, y: &Tensor, params: &SsimParams) -> Result<()> {
    params.validate()?;
    ensure!(
        x.shape() == y.shape(),
        "SSIM shape mismatch: {:?} vs {:?}",
        x.shape(),
        y.shape()
    );
    ensure!(x.channels() == 1, "SSIM expects single-channel images");
    let (h, w) = x.spatial();
    ensure!(
        h >= params.window && w >= params.window,
        "image {h}x{w} smaller than the {0}x{0} SSIM window",
        params.window
    );
    Ok(())
}

fn ssim_impl(x: &Tensor, y: &Tensor, params: &SsimParams, with_grad: bool) -> Result<(f64, Option<Tensor>)> {
    check_ssim_inputs(x, y, params)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut grads = Vec::new();
    for n in 0..x.batch() {
        let (s, p, g) = ssim_plane(&x.plane(n), &y.plane(n), params, with_grad);
        sum += s;
        count += p;
        if let Some(g) = g {
            grads.push(g);
        }
    }
    let value = sum / count as f64;
    let grad = if with_grad {
        let scale = 1.0 / count as f64;
        let data: Vec<f64> = grads.iter().flat_map(|g| g.iter().map(|v| v * scale)).collect();
        Some(Tensor::from_vec(x.shape(), data)?)
    } else {
        None
    };
    Ok((value, grad))
}

/// Mean SSIM over every window position of every image in the batch.
pub fn ssim(x: &Tensor, y: &Tensor, params: &SsimParams) -> Result<f64> {
    Ok(ssim_impl(x, y, params, false)?.0)
}

/// SSIM and its gradient w.r.t. `x`.
pub fn ssim_with_grad(x: &Tensor, y: &Tensor, params: &SsimParams) -> Result<(f64, Tensor)> {
    let (v, g) = ssim_impl(x, y, params, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// Components of the combined loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub mse: f64,
    pub ssim: f64,
}

/// `MSE(v̂, v) + weight · (1 − SSIM(noisy − v̂, noisy − v))`.
///
/// MSE compares noise maps; SSIM compares the reconstructions they imply.
pub fn total_loss(v_hat: &Tensor, v: &Tensor, noisy: &Tensor, params: &SsimParams, weight: f64) -> Result<LossValue> {
    Ok(total_loss_impl(v_hat, v, noisy, params, weight, false)?.0)
}

/// [`total_loss`] and its gradient w.r.t. `v_hat`.
pub fn total_loss_with_grad(
    v_hat: &Tensor,
    v: &Tensor,
    noisy: &Tensor,
    params: &SsimParams,
    weight: f64,
) -> Result<(LossValue, Tensor)> {
    let (l, g) = total_loss_impl(v_hat, v, noisy, params, weight, true)?;
    Ok((l, g.expect("gradient requested")))
}

fn total_loss_impl(
    v_hat: &Tensor,
    v: &Tensor,
    noisy: &Tensor,
    params: &SsimParams,
    weight: f64,
    with_grad: bool,
) -> Result<(LossValue, Option<Tensor>)> {
    ensure!(weight >= 0.0 && weight.is_finite(), "loss weight must be non-negative, got {weight}");
    ensure!(
        v_hat.shape() == v.shape() && v.shape() == noisy.shape(),
        "loss operands differ in shape: {:?}, {:?}, {:?}",
        v_hat.shape(),
        v.shape(),
        noisy.shape()
    );
    let mse = mse_loss(v_hat, v)?;
    let recon = noisy.zip_map(v_hat, |y, n| y - n)?;
    let clean = noisy.zip_map(v, |y, n| y - n)?;
    let (s, ds) = ssim_impl(&recon, &clean, params, with_grad)?;
    let value = LossValue {
        total: mse + weight * (1.0 - s),
        mse,
        ssim: s,
    };
    let grad = match ds {
        // d(recon)/d(v̂) = -1 cancels the minus sign of (1 - SSIM)
        Some(ds) => Some(mse_grad(v_hat, v)?.zip_map(&ds, |a, b| a + weight * b)?),
        None => None,
    };
    Ok((value, grad))
}

/// Span of `t`'s values, or 1 when the tensor is constant.
pub fn dynamic_range(t: &Tensor) -> f64 {
    let (lo, hi) = t
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    if span > 0.0 && span.is_finite() {
        span
    } else {
        1.0
    }
}
