//! Synthetic mammogram-like phantoms with embedded microcalcifications.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::filter;
use crate::image::{Dataset, Image, PatchSampling};
use crate::rng;

/// Subsamples per pixel axis used to anti-alias calcification edges.
const SUPERSAMPLE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    /// Linear ramp along a seed-dependent direction.
    SmoothGradient,
    /// Ramp mixed with Gaussian-filtered white noise.
    FilteredNoiseTexture,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calcification {
    /// `(row, col)` in pixel coordinates; pixel centers sit on integers.
    pub center: (f64, f64),
    pub radius_px: f64,
    /// Added raw counts over the disc.
    pub contrast: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub width: usize,
    pub height: usize,
    pub background: Background,
    /// Texture correlation length in pixels.
    pub tissue_scale: f64,
    /// Background range in raw counts.
    pub intensity_range: (f64, f64),
    /// Fraction of background modulation given to the texture.
    #[serde(default = "default_texture_weight")]
    pub texture_weight: f64,
    #[serde(default)]
    pub calcifications: Vec<Calcification>,
    /// Bit depth recorded on generated images.
    #[serde(default = "default_bit_depth")]
    pub bit_depth: u32,
    /// Round output to integer counts.
    #[serde(default = "default_true")]
    pub quantize: bool,
    pub seed: u64,
}

fn default_texture_weight() -> f64 {
    0.6
}

fn default_bit_depth() -> u32 {
    12
}

fn default_true() -> bool {
    true
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let calcifications = [0.5, 0.75, 1.0, 1.5, 2.0, 3.0]
            .iter()
            .enumerate()
            .map(|(i, &r)| Calcification {
                center: (40.0 + 30.0 * i as f64, 60.0 + 25.0 * i as f64),
                radius_px: r,
                contrast: 400.0,
            })
            .collect();
        Self {
            width: 256,
            height: 256,
            background: Background::FilteredNoiseTexture,
            tissue_scale: 6.0,
            intensity_range: (1000.0, 3400.0),
            texture_weight: default_texture_weight(),
            calcifications,
            bit_depth: default_bit_depth(),
            quantize: true,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.width > 0 && self.height > 0, "phantom must be non-empty");
        let (low, high) = self.intensity_range;
        ensure!(
            low >= 0.0 && low < high && high.is_finite(),
            "intensity range must satisfy 0 <= low < high, got ({low}, {high})"
        );
        if self.quantize {
            ensure!(
                high.floor() >= low.ceil(),
                "quantized range ({low}, {high}) contains no integer"
            );
        }
        ensure!(
            self.tissue_scale > 0.0 && self.tissue_scale.is_finite(),
            "tissue scale must be positive"
        );
        ensure!(
            (0.0..=1.0).contains(&self.texture_weight),
            "texture weight must lie in [0, 1]"
        );
        ensure!((1..=32).contains(&self.bit_depth), "bit depth out of range");
        for (i, c) in self.calcifications.iter().enumerate() {
            ensure!(
                (0.5..=3.0).contains(&c.radius_px),
                "calcification {i}: radius {} outside [0.5, 3]",
                c.radius_px
            );
            ensure!(
                c.contrast > 0.0 && c.contrast.is_finite(),
                "calcification {i}: contrast must be positive"
            );
            ensure!(
                fits(c.center.0, c.radius_px, self.height) && fits(c.center.1, c.radius_px, self.width),
                "calcification {i} at {:?} (radius {}) leaves the image",
                c.center,
                c.radius_px
            );
        }
        Ok(())
    }
}

fn fits(center: f64, radius: f64, extent: usize) -> bool {
    center - radius >= -0.5 && center + radius <= extent as f64 - 0.5
}

/// Fraction of pixel `(r, c)` covered by the disc.
fn disc_coverage(r: usize, c: usize, calc: &Calcification) -> f64 {
    let step = 1.0 / SUPERSAMPLE as f64;
    let r2 = calc.radius_px * calc.radius_px;
    let mut hits = 0usize;
    for i in 0..SUPERSAMPLE {
        let y = r as f64 - 0.5 + (i as f64 + 0.5) * step - calc.center.0;
        for j in 0..SUPERSAMPLE {
            let x = c as f64 - 0.5 + (j as f64 + 0.5) * step - calc.center.1;
            if x * x + y * y <= r2 {
                hits += 1;
            }
        }
    }
    hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
}

fn rescale_unit(a: &mut Array2<f64>) {
    let (lo, hi) = a
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    if span > 0.0 {
        a.mapv_inplace(|v| (v - lo) / span);
    } else {
        a.fill(0.5);
    }
}

/// Renders `spec` into a raw-count image.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Image> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = rng::stream(spec.seed);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = angle.sin_cos();
    let mut unit = Array2::from_shape_fn((h, w), |(r, c)| r as f64 * dy + c as f64 * dx);
    rescale_unit(&mut unit);

    if spec.background == Background::FilteredNoiseTexture {
        let white = Array2::from_shape_simple_fn((h, w), || rng.sample::<f64, _>(StandardNormal));
        let mut texture = filter::gaussian_filter(&white, spec.tissue_scale)?;
        rescale_unit(&mut texture);
        let t = spec.texture_weight;
        unit.zip_mut_with(&texture, |g, &tx| *g = (1.0 - t) * *g + t * tx);
    }

    let (low, high) = spec.intensity_range;
    let mut pixels = unit.mapv(|g| (low + (high - low) * g).clamp(low, high));
    if spec.quantize {
        let (lq, hq) = (low.ceil(), high.floor());
        pixels.mapv_inplace(|v| v.round().clamp(lq, hq));
    }

    for calc in &spec.calcifications {
        let r0 = (calc.center.0 - calc.radius_px).floor().max(0.0) as usize;
        let r1 = ((calc.center.0 + calc.radius_px).ceil() as usize).min(h - 1);
        let c0 = (calc.center.1 - calc.radius_px).floor().max(0.0) as usize;
        let c1 = ((calc.center.1 + calc.radius_px).ceil() as usize).min(w - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let cov = disc_coverage(r, c, calc);
                if cov > 0.0 {
                    let add = calc.contrast * cov;
                    pixels[[r, c]] += if spec.quantize { add.round() } else { add };
                }
            }
        }
    }

    if pixels.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Contract("phantom produced invalid intensities".into()));
    }
    Image::raw(pixels, Some(spec.bit_depth))
}

/// Places the calcifications of `base` at random non-overlapping positions.
fn scatter_calcifications<R: Rng>(base: &PhantomSpec, rng: &mut R) -> Result<Vec<Calcification>> {
    let mut placed: Vec<Calcification> = Vec::with_capacity(base.calcifications.len());
    for calc in &base.calcifications {
        let r = calc.radius_px;
        let (hmin, hmax) = (r - 0.5, base.height as f64 - 0.5 - r);
        let (wmin, wmax) = (r - 0.5, base.width as f64 - 0.5 - r);
        ensure!(hmin <= hmax && wmin <= wmax, "calcification radius {r} too large for image");
        let mut attempt = 0;
        let center = loop {
            let cand = (rng.random_range(hmin..=hmax), rng.random_range(wmin..=wmax));
            let clear = placed.iter().all(|p| {
                let d = ((p.center.0 - cand.0).powi(2) + (p.center.1 - cand.1).powi(2)).sqrt();
                d > p.radius_px + r + 4.0
            });
            if clear {
                break cand;
            }
            attempt += 1;
            ensure!(attempt < 10_000, "could not place calcifications without overlap");
        };
        placed.push(Calcification { center, ..*calc });
    }
    Ok(placed)
}

/// Generates `n` phantoms from `base`, each with its own seed (derived from
/// `(seed, label, i)`) and calcification layout.
pub fn phantom_series(base: &PhantomSpec, label: &str, n: usize, seed: u64) -> Result<Vec<Image>> {
    base.validate()?;
    let split = rng::derive_named(seed, label);
    (0..n)
        .map(|i| {
            let s = rng::derive_seed(split, &[i as u64]);
            let mut layout_rng = rng::stream(rng::derive_named(s, "layout"));
            let spec = PhantomSpec {
                seed: s,
                calcifications: scatter_calcifications(base, &mut layout_rng)?,
                ..base.clone()
            };
            generate_phantom(&spec)
        })
        .collect()
}

/// Generates `n_train + n_val` phantoms and samples patches from both
/// splits.
pub fn generate_dataset(
    n_train: usize,
    n_val: usize,
    base: &PhantomSpec,
    sampling: &PatchSampling,
    seed: u64,
) -> Result<Dataset> {
    ensure!(n_train >= 1 && n_val >= 1, "both splits need at least one image");
    let train = phantom_series(base, "train", n_train, seed)?;
    let val = phantom_series(base, "val", n_val, seed)?;
    Dataset::new(train, val, sampling, rng::derive_named(seed, "split"))
}
