//! Separable Gaussian filtering with reflective borders.

use ndarray::Array2;

use crate::error::{ensure, Result};

/// Normalized discrete Gaussian kernel with radius `ceil(4σ)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    ensure!(sigma > 0.0 && sigma.is_finite(), "Gaussian sigma must be positive, got {sigma}");
    let radius = (4.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    Ok(k)
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
#[inline]
pub(crate) fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Convolves rows then columns with the symmetric 1D `kernel`.
pub fn separable_filter(input: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = input.dim();
    let radius = (kernel.len() / 2) as i64;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in kernel.iter().enumerate() {
                acc += kv * input[[r, reflect(c as i64 + j as i64 - radius, w)]];
            }
            tmp[[r, c]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in kernel.iter().enumerate() {
                acc += kv * tmp[[reflect(r as i64 + j as i64 - radius, h), c]];
            }
            out[[r, c]] = acc;
        }
    }
    out
}

/// Gaussian blur with standard deviation `sigma`.
pub fn gaussian_filter(input: &Array2<f64>, sigma: f64) -> Result<Array2<f64>> {
    Ok(separable_filter(input, &gaussian_kernel(sigma)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_are_normalized() {
        for sigma in [0.5, 1.0, 2.0] {
            let k = gaussian_kernel(sigma).unwrap();
            assert_eq!(k.len(), 2 * (4.0 * sigma).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(gaussian_kernel(0.0).is_err());
    }

    #[test]
    fn reflection_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn impulse_response_is_kernel_outer_product() {
        let mut img = Array2::zeros((21, 21));
        img[[10, 10]] = 1.0;
        let out = gaussian_filter(&img, 1.0).unwrap();
        // analytic discrete Gaussian: exp(-i²/2) / Σ_{|j|≤4} exp(-j²/2)
        let norm: f64 = (-4i32..=4).map(|j| (-(j * j) as f64 / 2.0).exp()).sum();
        let center = 1.0 / (norm * norm);
        assert!((out[[10, 10]] - center).abs() < 1e-15);
        let off = (-0.5f64).exp() / (norm * norm);
        assert!((out[[10, 11]] - off).abs() < 1e-15);
        assert!((out.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_is_preserved() {
        let img = Array2::from_elem((7, 5), 3.25);
        let out = gaussian_filter(&img, 2.0).unwrap();
        assert!(out.iter().all(|v| (v - 3.25).abs() < 1e-12));
    }
}
