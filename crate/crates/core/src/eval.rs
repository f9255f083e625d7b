//! Evaluation metrics, the Gaussian-filter baseline and the method
//! comparison report.
//!
//! Conventions: images are scored in the normalized-unit domain (raw counts
//! divided by the test case's normalization maximum, without clamping), the
//! PSNR peak is 1, SSIM uses the standard 11×11 window with `L = 1`, and
//! σ_image is the population standard deviation over the whole image
//! unless an ROI is given.

use std::fmt::Write as _;

use ndarray::{s, Array2};
use rayon::prelude::*;

use crate::error::{ensure, Result};
use crate::filter::gaussian_filter;
use crate::image::{Domain, Image};
use crate::loss::{ssim, SsimParams};
use crate::noise::{simulate_dose_reduction, to_photons, GainModel, InverseMode};
use crate::pipeline::{stabilized_denoise, OutputDomain};
use crate::tensor::Tensor;

/// Name of the identity row every report contains.
pub const NOISY_ROW: &str = "Noisy";
pub const PSNR_PEAK: f64 = 1.0;
pub const DEFAULT_GAUSSIAN_SIGMA: f64 = 1.0;

/// `10·log10(peak² / MSE)`; `+∞` when the images are identical.
pub fn psnr(reference: &Image, test: &Image, peak: f64) -> Result<f64> {
    psnr_arrays(reference.pixels(), test.pixels(), peak)
}

fn psnr_arrays(reference: &Array2<f64>, test: &Array2<f64>, peak: f64) -> Result<f64> {
    ensure!(
        reference.dim() == test.dim(),
        "PSNR operands differ in shape: {:?} vs {:?}",
        reference.dim(),
        test.dim()
    );
    ensure!(peak > 0.0 && peak.is_finite(), "PSNR peak must be positive, got {peak}");
    let mse = reference
        .iter()
        .zip(test)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    })
}

/// Rectangular region of interest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Roi {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

/// Population standard deviation of the pixels inside `roi` (whole image
/// when `None`).
pub fn sigma_image(img: &Image, roi: Option<Roi>) -> Result<f64> {
    sigma_array(img.pixels(), roi)
}

fn sigma_array(px: &Array2<f64>, roi: Option<Roi>) -> Result<f64> {
    let view = match roi {
        None => px.view(),
        Some(r) => {
            ensure!(r.height > 0 && r.width > 0, "ROI is empty");
            ensure!(
                r.row + r.height <= px.nrows() && r.col + r.width <= px.ncols(),
                "ROI {r:?} exceeds image {}x{}",
                px.nrows(),
                px.ncols()
            );
            px.slice(s![r.row..r.row + r.height, r.col..r.col + r.width])
        }
    };
    let n = view.len() as f64;
    let mean = view.sum() / n;
    Ok((view.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// Gaussian filtering in the Anscombe domain, inverted back to
/// `output`.
pub fn gaussian_denoise(
    noisy: &Image,
    gain: &GainModel,
    sigma: f64,
    output: OutputDomain,
    inverse: InverseMode,
) -> Result<Image> {
    ensure!(sigma > 0.0 && sigma.is_finite(), "Gaussian sigma must be positive, got {sigma}");
    stabilized_denoise(noisy, gain, output, inverse, |y| gaussian_filter(y.pixels(), sigma))
}

/// A ground-truth image, its noisy acquisition (both raw counts) and the
/// value mapped to 1 when normalizing.
#[derive(Debug, Clone, PartialEq)]
pub struct TestCase {
    pub gt: Image,
    pub noisy: Image,
    pub normalization_max: f64,
}

impl TestCase {
    pub fn new(gt: Image, noisy: Image, normalization_max: f64) -> Result<Self> {
        ensure!(
            gt.domain() == Domain::RawCounts && noisy.domain() == Domain::RawCounts,
            "test images must be raw counts"
        );
        ensure!(
            gt.pixels().dim() == noisy.pixels().dim(),
            "ground truth and noisy image differ in shape"
        );
        ensure!(
            normalization_max > 0.0 && normalization_max.is_finite(),
            "normalization maximum must be positive"
        );
        Ok(Self {
            gt,
            noisy,
            normalization_max,
        })
    }

    /// Simulates a reduced-dose acquisition of `full_dose`. The ground truth
    /// is the noiseless reduced-dose image `α·z`, and the normalization
    /// maximum is `α` times the full scale of the bit depth.
    pub fn simulate(full_dose: &Image, gain: &GainModel, alpha: f64, seed: u64) -> Result<Self> {
        let photons = to_photons(full_dose, gain)?;
        let bd = full_dose.bit_depth();
        let gt = photons.scaled(alpha)?.to_counts(gain, bd)?;
        let noisy = simulate_dose_reduction(&photons, alpha, seed)?.to_counts(gain, bd)?;
        let max = full_dose.full_scale().unwrap_or_else(|| {
            full_dose.pixels().iter().copied().fold(0.0, f64::max)
        });
        Self::new(gt, noisy, alpha * max)
    }
}

/// Maps a noisy raw-count image to a denoised raw-count image.
pub type Denoiser<'a> = Box<dyn Fn(&Image) -> Result<Image> + Send + Sync + 'a>;

pub struct Method<'a> {
    pub name: String,
    pub denoise: Denoiser<'a>,
}

impl<'a> Method<'a> {
    pub fn new(name: impl Into<String>, denoise: impl Fn(&Image) -> Result<Image> + Send + Sync + 'a) -> Self {
        Self {
            name: name.into(),
            denoise: Box::new(denoise),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub ssim: SsimParams,
    pub psnr_peak: f64,
    pub roi: Option<Roi>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ssim: SsimParams::default().with_range(1.0),
            psnr_peak: PSNR_PEAK,
            roi: None,
        }
    }
}

/// Mean scores of one method over the test set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub method: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub sigma_image: f64,
    pub n_images: usize,
    /// Set when the method failed; scores are then NaN.
    pub error: Option<String>,
}

impl EvalRecord {
    pub fn psnr_is_infinite(&self) -> bool {
        self.psnr_db == f64::INFINITY
    }

    fn failed(method: &str, n: usize, msg: String) -> Self {
        Self {
            method: method.to_string(),
            psnr_db: f64::NAN,
            ssim: f64::NAN,
            sigma_image: f64::NAN,
            n_images: n,
            error: Some(msg),
        }
    }
}

/// Externally reported numbers shown for reference only.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub method: String,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub sigma_image: Option<f64>,
    pub note: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, Copy)]
struct Scores {
    psnr: f64,
    ssim: f64,
    sigma: f64,
}

fn score(gt: &Array2<f64>, out: &Array2<f64>, opts: &EvalOptions) -> Result<Scores> {
    let as_tensor = |a: &Array2<f64>| Tensor::stack_planes([a]);
    Ok(Scores {
        psnr: psnr_arrays(gt, out, opts.psnr_peak)?,
        ssim: ssim(&as_tensor(out)?, &as_tensor(gt)?, &opts.ssim)?,
        sigma: sigma_array(out, opts.roi)?,
    })
}

/// Order-independent mean: sums the sorted values.
fn mean_sorted(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.into_iter().sum::<f64>() / n
}

fn evaluate_method(method: &Method, cases: &[TestCase], opts: &EvalOptions) -> EvalRecord {
    let scored: Result<Vec<Scores>> = cases
        .par_iter()
        .map(|case| {
            let out = (method.denoise)(&case.noisy)?;
            ensure!(
                out.pixels().dim() == case.gt.pixels().dim(),
                "output shape {:?} differs from input {:?}",
                out.pixels().dim(),
                case.gt.pixels().dim()
            );
            ensure!(
                out.domain() == Domain::RawCounts,
                "denoiser must return raw counts, got {:?}",
                out.domain()
            );
            let max = case.normalization_max;
            score(&case.gt.pixels().mapv(|v| v / max), &out.pixels().mapv(|v| v / max), opts)
        })
        .collect();
    match scored {
        Ok(s) => EvalRecord {
            method: method.name.clone(),
            psnr_db: mean_sorted(s.iter().map(|x| x.psnr).collect()),
            ssim: mean_sorted(s.iter().map(|x| x.ssim).collect()),
            sigma_image: mean_sorted(s.iter().map(|x| x.sigma).collect()),
            n_images: s.len(),
            error: None,
        },
        Err(e) => EvalRecord::failed(&method.name, cases.len(), e.to_string()),
    }
}

/// Scores every method plus the identity ("Noisy") row on `cases`.
/// A failing method gets an error record; the others still run.
pub fn evaluate(methods: &[Method], cases: &[TestCase], opts: &EvalOptions) -> Result<EvalReport> {
    ensure!(!cases.is_empty(), "test set is empty");
    opts.ssim.validate()?;
    let mut names = vec![NOISY_ROW];
    for m in methods {
        ensure!(!names.contains(&m.name.as_str()), "duplicate method name '{}'", m.name);
        names.push(&m.name);
    }
    let identity = Method::new(NOISY_ROW, |img: &Image| Ok(img.clone()));
    let records = std::iter::once(&identity)
        .chain(methods)
        .map(|m| evaluate_method(m, cases, opts))
        .collect();
    Ok(EvalReport {
        records,
        annotations: Vec::new(),
    })
}

fn fmt_value(v: f64, decimals: usize) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v.is_nan() {
        "-".into()
    } else {
        format!("{v:.decimals$}")
    }
}

fn fmt_opt(v: Option<f64>, decimals: usize) -> String {
    v.map_or_else(|| "-".into(), |v| fmt_value(v, decimals))
}

impl EvalReport {
    pub fn record(&self, method: &str) -> Option<&EvalRecord> {
        self.records.iter().find(|r| r.method == method)
    }

    /// Aligned table with columns Methods, PSNR, SSIM, σ_image.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<[String; 4]> = vec![["Methods".into(), "PSNR".into(), "SSIM".into(), "σ_image".into()]];
        let mut notes = Vec::new();
        for r in &self.records {
            rows.push([
                r.method.clone(),
                fmt_value(r.psnr_db, 2),
                fmt_value(r.ssim, 4),
                fmt_value(r.sigma_image, 4),
            ]);
            if let Some(e) = &r.error {
                notes.push(format!("{}: failed: {e}", r.method));
            }
        }
        for a in &self.annotations {
            rows.push([
                format!("{} *", a.method),
                fmt_opt(a.psnr_db, 2),
                fmt_opt(a.ssim, 4),
                fmt_opt(a.sigma_image, 4),
            ]);
            notes.push(format!("{} *: external reference, not computed here. {}", a.method, a.note));
        }
        let width = |i: usize| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0);
        let widths = [width(0), width(1), width(2), width(3)];
        let mut out = String::new();
        for (i, r) in rows.iter().enumerate() {
            let _ = write!(out, "{:<w$}", r[0], w = widths[0]);
            for c in 1..4 {
                let pad = widths[c] - r[c].chars().count();
                let _ = write!(out, "  {}{}", " ".repeat(pad), r[c]);
            }
            out.push('\n');
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 6;
                out.push_str(&"-".repeat(total));
                out.push('\n');
            }
        }
        for n in notes {
            out.push_str(&n);
            out.push('\n');
        }
        out
    }

    /// `method,psnr_db,ssim,sigma_image,n_images,kind,note` with
    /// round-trip-exact floats.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,psnr_db,ssim,sigma_image,n_images,kind,note\n");
        let quote = |s: &str| format!("\"{}\"", s.replace('"', "\"\""));
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{},{},{}",
                quote(&r.method),
                r.psnr_db,
                r.ssim,
                r.sigma_image,
                r.n_images,
                if r.error.is_some() { "error" } else { "measured" },
                quote(r.error.as_deref().unwrap_or(""))
            );
        }
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:?}"));
        for a in &self.annotations {
            let _ = writeln!(
                out,
                "{},{},{},{},,external,{}",
                quote(&a.method),
                opt(a.psnr_db),
                opt(a.ssim),
                opt(a.sigma_image),
                quote(&a.note)
            );
        }
        out
    }
}
