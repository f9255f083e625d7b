//! Measurement physics: gain estimation, photon conversion, Poisson dose
//! reduction and the Anscombe variance-stabilizing transform.
//!
//! A detector pixel value `z` relates to the expected photon count `λ`
//! through a linear gain, `z = k·λ`. For Poisson-distributed photon counts
//! the gain is recoverable from a flat region as `var(z) / mean(z)`.
//! Lowering the dose by a factor `α` replaces each count by a fresh draw
//! from `Poisson(α·λ)`, and the Anscombe transform `2·sqrt(z + 3/8)` turns
//! that signal-dependent noise into approximately unit-variance Gaussian
//! noise.

use ndarray::Array2;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::{Domain, Image};
use crate::rng;

/// Linear scale between pixel value and expected photon count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainModel {
    /// Pixel value per photon.
    pub k: f64,
    /// Number of samples behind the estimate.
    pub estimation_pixels: usize,
    /// Approximate 95% confidence half-width of `k`.
    pub confidence_halfwidth: f64,
}

impl GainModel {
    /// A gain known a priori (e.g. a simulation parameter).
    pub fn known(k: f64) -> Result<Self> {
        ensure!(k > 0.0 && k.is_finite(), "gain must be positive, got {k}");
        Ok(Self {
            k,
            estimation_pixels: usize::MAX,
            confidence_halfwidth: 0.0,
        })
    }
}

/// Estimates the gain as unbiased sample variance over sample mean.
///
/// The confidence half-width uses the delta method with a Gaussian
/// approximation for the variance estimator:
/// `1.96 · k · sqrt(2/(n-1) + s²/(n·m²))`.
pub fn estimate_gain(samples: &[f64]) -> Result<GainModel> {
    let n = samples.len();
    ensure!(n >= 2, "gain estimation needs at least 2 samples, got {n}");
    if let Some(v) = samples.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Contract(format!("invalid raw sample {v}")));
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    if mean <= 0.0 {
        return Err(Error::Degenerate(format!("sample mean {mean} is not positive")));
    }
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    if var <= 0.0 {
        return Err(Error::Degenerate("samples have zero variance".into()));
    }
    let k = var / mean;
    let rel = (2.0 / (nf - 1.0) + var / (nf * mean * mean)).sqrt();
    Ok(GainModel {
        k,
        estimation_pixels: n,
        confidence_halfwidth: 1.96 * k * rel,
    })
}

/// Expected photon counts per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotonImage {
    lambdas: Array2<f64>,
}

impl PhotonImage {
    pub fn new(lambdas: Array2<f64>) -> Result<Self> {
        ensure!(!lambdas.is_empty(), "photon image must be non-empty");
        if let Some(v) = lambdas.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Contract(format!("invalid photon count {v}")));
        }
        Ok(Self { lambdas })
    }

    pub fn lambdas(&self) -> &Array2<f64> {
        &self.lambdas
    }

    pub fn scaled(&self, alpha: f64) -> Result<Self> {
        Self::new(self.lambdas.mapv(|l| l * alpha))
    }

    /// Back to pixel values, `z = k·λ`.
    pub fn to_counts(&self, gain: &GainModel, bit_depth: Option<u32>) -> Result<Image> {
        Image::raw(self.lambdas.mapv(|l| l * gain.k), bit_depth)
    }
}

/// `λ = z / k`.
pub fn to_photons(img: &Image, gain: &GainModel) -> Result<PhotonImage> {
    ensure!(
        img.domain() == Domain::RawCounts,
        "to_photons expects raw counts, got {:?}",
        img.domain()
    );
    ensure!(gain.k > 0.0, "gain must be positive, got {}", gain.k);
    PhotonImage::new(img.pixels().mapv(|z| z / gain.k))
}

fn check_alpha(alpha: f64) -> Result<()> {
    ensure!(
        alpha > 0.0 && alpha <= 1.0,
        "dose factor alpha must lie in (0, 1], got {alpha}"
    );
    Ok(())
}

/// One draw from `Poisson(mean)`; `mean = 0` is degenerate at 0.
fn poisson_draw<R: rand::Rng>(mean: f64, rng: &mut R) -> f64 {
    if mean <= 0.0 {
        0.0
    } else {
        Poisson::new(mean)
            .expect("finite positive Poisson mean")
            .sample(rng)
    }
}

/// Replaces each count by an independent `Poisson(α·λ)` draw.
///
/// Row `r` draws from its own stream `row_stream(seed, r)`, so the output is
/// a function of `(photons, alpha, seed)` only.
pub fn simulate_dose_reduction(photons: &PhotonImage, alpha: f64, seed: u64) -> Result<PhotonImage> {
    check_alpha(alpha)?;
    let (h, w) = photons.lambdas.dim();
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::row_stream(seed, r);
            photons
                .lambdas
                .row(r)
                .iter()
                .map(|&l| poisson_draw(alpha * l, &mut rng))
                .collect()
        })
        .collect();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    PhotonImage::new(Array2::from_shape_vec((h, w), flat).expect("row lengths match width"))
}

/// `2·sqrt(3/8)`: the transform of a zero count.
pub const ANSCOMBE_ZERO: f64 = 1.224_744_871_391_589;

#[inline]
pub fn anscombe(z: f64) -> f64 {
    2.0 * (z + 0.375).sqrt()
}

/// `(a/2)² - 3/8`, clamped at 0.
#[inline]
pub fn inverse_algebraic(a: f64) -> f64 {
    if a <= ANSCOMBE_ZERO {
        return 0.0;
    }
    (0.25 * a * a - 0.375).max(0.0)
}

/// Closed-form approximation of the exact unbiased inverse:
/// `(a/2)² - 1/8 + ¼·sqrt(3/2)/a - 11/8/a² + ⅝·sqrt(3/2)/a³`, clamped at 0.
/// Maps `E[anscombe(Poisson(λ))]` back to `λ`.
#[inline]
pub fn inverse_unbiased(a: f64) -> f64 {
    if a <= ANSCOMBE_ZERO {
        return 0.0;
    }
    let s = 1.5f64.sqrt();
    let inv = 1.0 / a;
    let z = 0.25 * a * a - 0.125 + 0.25 * s * inv - 1.375 * inv * inv + 0.625 * s * inv * inv * inv;
    z.max(0.0)
}

fn forward_array(values: &Array2<f64>) -> Result<Image> {
    if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Contract(format!(
            "Anscombe transform needs non-negative input, got {v}"
        )));
    }
    Image::new(values.mapv(anscombe), Domain::Anscombe, None)
}

/// Forward transform of a photon-count image.
pub fn anscombe_forward(photons: &PhotonImage) -> Result<Image> {
    forward_array(&photons.lambdas)
}

/// Forward transform of an image holding photon counts in the raw domain.
pub fn anscombe_forward_image(img: &Image) -> Result<Image> {
    ensure!(
        img.domain() == Domain::RawCounts,
        "Anscombe transform expects photon counts, got {:?}",
        img.domain()
    );
    forward_array(img.pixels())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InverseMode {
    Algebraic,
    #[default]
    Unbiased,
}

impl std::str::FromStr for InverseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "algebraic" => Ok(Self::Algebraic),
            "unbiased" => Ok(Self::Unbiased),
            other => Err(Error::Contract(format!("unknown inverse mode '{other}'"))),
        }
    }
}

/// Maps an Anscombe-domain image back to photon counts (raw domain).
pub fn anscombe_inverse(img: &Image, mode: InverseMode) -> Result<Image> {
    ensure!(
        img.domain() == Domain::Anscombe,
        "inverse Anscombe expects the anscombe domain, got {:?}",
        img.domain()
    );
    let f = match mode {
        InverseMode::Algebraic => inverse_algebraic,
        InverseMode::Unbiased => inverse_unbiased,
    };
    Image::raw(img.pixels().mapv(f), None)
}

/// A simulated low-dose acquisition and its noiseless counterpart, both in
/// the Anscombe domain.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePair {
    pub noisy: Image,
    pub clean: Image,
    /// `noisy - clean`.
    pub noise_map: Array2<f64>,
    pub alpha: f64,
    pub seed: u64,
}

/// Builds a training pair from a full-dose raw image: photons, Poisson draw
/// at dose `alpha`, Anscombe. The clean image is the transform of the
/// noiseless scaled photon image `α·λ`.
pub fn augment_pair(gt: &Image, gain: &GainModel, alpha: f64, seed: u64) -> Result<NoisePair> {
    check_alpha(alpha)?;
    let photons = to_photons(gt, gain)?;
    let noisy_photons = simulate_dose_reduction(&photons, alpha, seed)?;
    let clean = anscombe_forward(&photons.scaled(alpha)?)?;
    let mut noisy = anscombe_forward(&noisy_photons)?.into_pixels();
    let mut noise_map = &noisy - clean.pixels();
    // make clean + noise_map == noisy hold exactly in floating point
    for _ in 0..4 {
        let rebuilt = clean.pixels() + &noise_map;
        if rebuilt == noisy {
            break;
        }
        noisy = rebuilt;
        noise_map = &noisy - clean.pixels();
    }
    Ok(NoisePair {
        noisy: Image::new(noisy, Domain::Anscombe, None)?,
        clean,
        noise_map,
        alpha,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    /// Independent sampler for the oracles: Knuth's multiplication method,
    /// exact for small means.
    fn knuth_poisson(lambda: f64, n: usize, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = rng::stream(seed);
        let limit = (-lambda).exp();
        (0..n)
            .map(|_| {
                let mut k = 0.0;
                let mut p: f64 = rng.random();
                while p > limit {
                    k += 1.0;
                    p *= rng.random::<f64>();
                }
                k
            })
            .collect()
    }

    #[test]
    fn gain_of_scaled_poisson() {
        let z: Vec<f64> = knuth_poisson(100.0, 1_000_000, 1)
            .into_iter()
            .map(|v| 2.0 * v)
            .collect();
        let g = estimate_gain(&z).unwrap();
        assert!((1.96..=2.04).contains(&g.k), "k = {}", g.k);
        assert!(g.confidence_halfwidth > 0.0 && g.confidence_halfwidth < 0.02);
        assert_eq!(g.estimation_pixels, 1_000_000);
    }

    #[test]
    fn gain_of_pure_poisson_from_simulator() {
        let lam = PhotonImage::new(Array2::from_elem((1000, 1000), 400.0)).unwrap();
        let z = simulate_dose_reduction(&lam, 1.0, 5).unwrap();
        let g = estimate_gain(z.lambdas().as_slice().unwrap()).unwrap();
        assert!((0.98..=1.02).contains(&g.k), "k = {}", g.k);
    }

    #[test]
    fn gain_degenerate_inputs() {
        assert!(matches!(estimate_gain(&[5.0; 10]), Err(Error::Degenerate(_))));
        assert!(matches!(estimate_gain(&[0.0; 10]), Err(Error::Degenerate(_))));
        assert!(matches!(estimate_gain(&[1.0]), Err(Error::Contract(_))));
        assert!(estimate_gain(&[1.0, -1.0]).is_err());
    }

    #[test]
    fn photon_conversion() {
        let img = Image::raw(
            Array2::from_shape_vec((1, 3), vec![200.0, 0.0, 50.0]).unwrap(),
            None,
        )
        .unwrap();
        let p = to_photons(&img, &GainModel::known(2.0).unwrap()).unwrap();
        assert_eq!(p.lambdas().as_slice().unwrap(), &[100.0, 0.0, 25.0]);
        let id = to_photons(&img, &GainModel::known(1.0).unwrap()).unwrap();
        assert_eq!(id.lambdas(), img.pixels());
    }

    #[test]
    fn dose_reduction_moments() {
        let lam = PhotonImage::new(Array2::from_elem((1000, 1000), 100.0)).unwrap();
        let low = simulate_dose_reduction(&lam, 0.2, 9).unwrap();
        let (m, v) = mean_var(low.lambdas().as_slice().unwrap());
        assert!((19.8..=20.2).contains(&m), "mean {m}");
        assert!((19.5..=20.5).contains(&v), "var {v}");
    }

    #[test]
    fn dose_reduction_edge_cases() {
        let zero = PhotonImage::new(Array2::zeros((8, 8))).unwrap();
        let out = simulate_dose_reduction(&zero, 0.2, 1).unwrap();
        assert!(out.lambdas().iter().all(|&v| v == 0.0));
        for bad in [0.0, -0.1, 1.01, f64::NAN] {
            assert!(matches!(
                simulate_dose_reduction(&zero, bad, 1),
                Err(Error::Contract(_))
            ));
        }
    }

    #[test]
    fn dose_reduction_is_seeded() {
        let lam = PhotonImage::new(Array2::from_elem((16, 16), 50.0)).unwrap();
        let a = simulate_dose_reduction(&lam, 0.5, 3).unwrap();
        assert_eq!(a, simulate_dose_reduction(&lam, 0.5, 3).unwrap());
        assert_ne!(a, simulate_dose_reduction(&lam, 0.5, 4).unwrap());
    }

    #[test]
    fn anscombe_point_values() {
        assert_abs_diff_eq!(anscombe(0.0), 1.224744871, epsilon = 1e-9);
        assert_abs_diff_eq!(anscombe(1.0), 2.345207880, epsilon = 1e-9);
        assert_abs_diff_eq!(anscombe(0.0), ANSCOMBE_ZERO, epsilon = 1e-15);
        assert_eq!(inverse_algebraic(1.224744871), 0.0);
        for z in [0.0, 1.0, 10.0, 1000.0] {
            assert_abs_diff_eq!(inverse_algebraic(anscombe(z)), z, epsilon = 1e-9);
        }
    }

    #[test]
    fn anscombe_stabilizes_poisson_variance() {
        let draws = knuth_poisson(100.0, 1_000_000, 17);
        let t: Vec<f64> = draws.iter().map(|&z| anscombe(z)).collect();
        let (_, v) = mean_var(&t);
        assert!((0.95..=1.05).contains(&v.sqrt()), "std {}", v.sqrt());
    }

    #[test]
    fn unbiased_inverse_recovers_mean_count() {
        // the inverse of the expected transformed value is the Poisson mean
        let draws = knuth_poisson(20.0, 1_000_000, 23);
        let mean_t = draws.iter().map(|&z| anscombe(z)).sum::<f64>() / draws.len() as f64;
        let est = inverse_unbiased(mean_t);
        assert!((est - 20.0).abs() < 0.2, "unbiased {est}");
        // the algebraic inverse of the same mean is biased low
        assert!(inverse_algebraic(mean_t) < 19.9);
    }

    #[test]
    fn inverse_checks_domain_and_forward_rejects_negatives() {
        let raw = Image::filled(2, 2, 3.0, Domain::RawCounts).unwrap();
        assert!(matches!(
            anscombe_inverse(&raw, InverseMode::Algebraic),
            Err(Error::Contract(_))
        ));
        let neg = Image::filled(2, 2, -3.0, Domain::Anscombe).unwrap();
        assert!(anscombe_forward_image(&neg).is_err());
        assert!(PhotonImage::new(Array2::from_elem((2, 2), -1.0)).is_err());
        let low = anscombe_inverse(&neg, InverseMode::Unbiased).unwrap();
        assert!(low.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn augment_pair_is_deterministic_and_fresh_per_seed() {
        let gt = Image::filled(32, 32, 1000.0, Domain::RawCounts).unwrap();
        let gain = GainModel::known(2.0).unwrap();
        let a = augment_pair(&gt, &gain, 0.2, 1).unwrap();
        assert_eq!(a, augment_pair(&gt, &gain, 0.2, 1).unwrap());
        let b = augment_pair(&gt, &gain, 0.2, 2).unwrap();
        assert!(a.noise_map.iter().zip(&b.noise_map).any(|(x, y)| x != y));
        assert_eq!(a.clean, b.clean);
    }

    #[test]
    fn augment_pair_noise_is_unit_variance() {
        let gt = Image::filled(500, 500, 2000.0, Domain::RawCounts).unwrap();
        let pair = augment_pair(&gt, &GainModel::known(2.0).unwrap(), 0.2, 4).unwrap();
        let (_, v) = mean_var(pair.noise_map.as_slice().unwrap());
        assert!((0.95..=1.05).contains(&v.sqrt()), "std {}", v.sqrt());
    }

    proptest! {
        #[test]
        fn anscombe_is_increasing_and_invertible(a in 0.0f64..1e7, b in 0.0f64..1e7) {
            prop_assume!(a < b);
            prop_assert!(anscombe(a) < anscombe(b));
            prop_assert!((inverse_algebraic(anscombe(a)) - a).abs() <= 1e-9 * a.max(1.0));
        }

        #[test]
        fn noise_pair_reconstructs_noisy(level in 0.0f64..5000.0, alpha in 0.01f64..1.0, seed in any::<u64>()) {
            let gt = Image::filled(8, 8, level, Domain::RawCounts).unwrap();
            let pair = augment_pair(&gt, &GainModel::known(1.5).unwrap(), alpha, seed).unwrap();
            let rebuilt = pair.clean.pixels() + &pair.noise_map;
            prop_assert_eq!(&rebuilt, pair.noisy.pixels());
            prop_assert_eq!(&pair.noise_map, &(pair.noisy.pixels() - pair.clean.pixels()));
        }
    }
}
