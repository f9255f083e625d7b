//! Convolution, batch normalization and ReLU with explicit backward passes.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::rng;
use crate::tensor::{gemm, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// A named parameter tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    fn new(name: String, shape: Vec<usize>, value: Vec<f64>) -> Self {
        let n = value.len();
        debug_assert_eq!(n, shape.iter().product::<usize>());
        Self {
            name,
            shape,
            value,
            grad: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Same-padded, stride-1 2D convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    /// `[out, in, k, k]`
    pub weight: Param,
    /// `[out]`
    pub bias: Param,
}

impl Conv2d {
    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero bias. The weight
    /// stream is derived from `seed` and the layer name.
    pub fn new(name: &str, in_ch: usize, out_ch: usize, kernel: usize, seed: u64) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let mut rng = rng::stream(rng::derive_named(seed, &format!("{name}.weight")));
        let weight: Vec<f64> = (0..out_ch * in_ch * kernel * kernel)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Self {
            in_ch,
            out_ch,
            kernel,
            weight: Param::new(
                format!("{name}.weight"),
                vec![out_ch, in_ch, kernel, kernel],
                weight,
            ),
            bias: Param::new(format!("{name}.bias"), vec![out_ch], vec![0.0; out_ch]),
        }
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    /// Unfolds one sample into `[in·k·k, h·w]` patch columns.
    fn im2col(&self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let k = self.kernel;
        let pad = k / 2;
        let hw = h * w;
        let mut col = vec![0.0; self.col_rows() * hw];
        for ci in 0..self.in_ch {
            let plane = &x[ci * hw..(ci + 1) * hw];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut col[((ci * k + ki) * k + kj) * hw..][..hw];
                    let dx = kj as isize - pad as isize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    for y in 0..h {
                        let sy = y as isize + ki as isize - pad as isize;
                        if sy < 0 || sy >= h as isize || x0 >= x1 {
                            continue;
                        }
                        let src = &plane[sy as usize * w..][..w];
                        let dst = &mut row[y * w..][..w];
                        let s0 = (x0 as isize + dx) as usize;
                        dst[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                    }
                }
            }
        }
        col
    }

    /// Adjoint of [`Self::im2col`]: scatters patch columns back onto the input grid.
    fn col2im(&self, col: &[f64], h: usize, w: usize) -> Vec<f64> {
        let k = self.kernel;
        let pad = k / 2;
        let hw = h * w;
        let mut x = vec![0.0; self.in_ch * hw];
        for ci in 0..self.in_ch {
            let plane = &mut x[ci * hw..(ci + 1) * hw];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &col[((ci * k + ki) * k + kj) * hw..][..hw];
                    let dx = kj as isize - pad as isize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    for y in 0..h {
                        let sy = y as isize + ki as isize - pad as isize;
                        if sy < 0 || sy >= h as isize || x0 >= x1 {
                            continue;
                        }
                        let dst = &mut plane[sy as usize * w..][..w];
                        let src = &row[y * w..][..w];
                        let s0 = (x0 as isize + dx) as usize;
                        for (d, s) in dst[s0..s0 + (x1 - x0)].iter_mut().zip(&src[x0..x1]) {
                            *d += s;
                        }
                    }
                }
            }
        }
        x
    }

    fn forward_sample(&self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let hw = h * w;
        let mut out = vec![0.0; self.out_ch * hw];
        for (o, &b) in self.bias.value.iter().enumerate() {
            out[o * hw..(o + 1) * hw].fill(b);
        }
        if self.kernel == 1 {
            gemm(self.out_ch, self.in_ch, hw, &self.weight.value, false, x, false, &mut out, 1.0);
        } else {
            let col = self.im2col(x, h, w);
            gemm(self.out_ch, self.col_rows(), hw, &self.weight.value, false, &col, false, &mut out, 1.0);
        }
        out
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape();
        debug_assert_eq!(c, self.in_ch);
        let outs: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| self.forward_sample(x.sample(i), h, w))
            .collect();
        Tensor::from_vec([n, self.out_ch, h, w], outs.concat()).expect("conv output shape")
    }

    /// Accumulates weight and bias gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let [n, _, h, w] = x.shape();
        let hw = h * w;
        let kdim = self.col_rows();
        let this = &*self;
        let per_sample: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let dyi = dy.sample(i);
                let mut dw = vec![0.0; this.out_ch * kdim];
                let db: Vec<f64> = (0..this.out_ch)
                    .map(|o| dyi[o * hw..(o + 1) * hw].iter().sum())
                    .collect();
                if this.kernel == 1 {
                    let xi = x.sample(i);
                    gemm(this.out_ch, hw, kdim, dyi, false, xi, true, &mut dw, 0.0);
                    let mut dx = vec![0.0; kdim * hw];
                    gemm(kdim, this.out_ch, hw, &this.weight.value, true, dyi, false, &mut dx, 0.0);
                    (dw, db, dx)
                } else {
                    let col = this.im2col(x.sample(i), h, w);
                    gemm(this.out_ch, hw, kdim, dyi, false, &col, true, &mut dw, 0.0);
                    let mut dcol = vec![0.0; kdim * hw];
                    gemm(kdim, this.out_ch, hw, &this.weight.value, true, dyi, false, &mut dcol, 0.0);
                    (dw, db, this.col2im(&dcol, h, w))
                }
            })
            .collect();
        let mut dx = Vec::with_capacity(n * self.in_ch * hw);
        // fixed-order reduction keeps gradients independent of thread count
        for (dw, db, dxi) in per_sample {
            self.weight.grad.iter_mut().zip(&dw).for_each(|(g, v)| *g += v);
            self.bias.grad.iter_mut().zip(&db).for_each(|(g, v)| *g += v);
            dx.extend(dxi);
        }
        Tensor::from_vec([n, self.in_ch, h, w], dx).expect("conv input shape")
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Per-channel batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
}

/// Values kept from a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), vec![channels], vec![1.0; channels]),
            beta: Param::new(format!("{name}.beta"), vec![channels], vec![0.0; channels]),
            running_mean: Param::new(
                format!("{name}.running_mean"),
                vec![channels],
                vec![0.0; channels],
            ),
            running_var: Param::new(
                format!("{name}.running_var"),
                vec![channels],
                vec![1.0; channels],
            ),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes with running statistics.
    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let mut out = x.clone();
        let data = out.data_mut();
        for ch in 0..c {
            let scale = self.gamma.value[ch] / (self.running_var.value[ch] + BN_EPSILON).sqrt();
            let shift = self.beta.value[ch] - self.running_mean.value[ch] * scale;
            for i in 0..n {
                data[(i * c + ch) * hw..][..hw]
                    .iter_mut()
                    .for_each(|v| *v = *v * scale + shift);
            }
        }
        out
    }

    /// Normalizes with batch statistics and updates the running estimates
    /// (unbiased variance, momentum [`BN_MOMENTUM`]).
    pub fn forward_train(&mut self, x: &Tensor) -> (Tensor, BnCache) {
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let m = (n * hw) as f64;
        let src = x.data();
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let chunks = || (0..n).map(move |i| &src[(i * c + ch) * hw..][..hw]);
            let mean = chunks().flatten().sum::<f64>() / m;
            let var = chunks().flatten().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            let is = 1.0 / (var + BN_EPSILON).sqrt();
            inv_std[ch] = is;
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for i in 0..n {
                let off = (i * c + ch) * hw;
                for j in off..off + hw {
                    let xh = (src[j] - mean) * is;
                    xhat.data_mut()[j] = xh;
                    out.data_mut()[j] = g * xh + b;
                }
            }
            let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            let rm = &mut self.running_mean.value[ch];
            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean;
            let rv = &mut self.running_var.value[ch];
            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * unbiased;
        }
        (out, BnCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &Tensor) -> Tensor {
        let [n, c, h, w] = dy.shape();
        let hw = h * w;
        let m = (n * hw) as f64;
        let (dyd, xh) = (dy.data(), cache.xhat.data());
        let mut dx = Tensor::zeros(dy.shape());
        for ch in 0..c {
            let idx = || (0..n).flat_map(move |i| (i * c + ch) * hw..(i * c + ch + 1) * hw);
            let sum_dy: f64 = idx().map(|j| dyd[j]).sum();
            let sum_dy_xh: f64 = idx().map(|j| dyd[j] * xh[j]).sum();
            self.gamma.grad[ch] += sum_dy_xh;
            self.beta.grad[ch] += sum_dy;
            let k = self.gamma.value[ch] * cache.inv_std[ch] / m;
            for j in idx() {
                dx.data_mut()[j] = k * (m * dyd[j] - sum_dy - xh[j] * sum_dy_xh);
            }
        }
        dx
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(out: &Tensor, dy: &Tensor) -> Tensor {
    out.zip_map(dy, |o, d| if o > 0.0 { d } else { 0.0 })
        .expect("relu shapes")
}
