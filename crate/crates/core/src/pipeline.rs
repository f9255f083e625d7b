//! Shared Anscombe-domain denoising pipeline: counts → photons → Anscombe →
//! denoise → requested output domain.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::{Domain, Image};
use crate::noise::{anscombe_forward, anscombe_inverse, to_photons, GainModel, InverseMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputDomain {
    /// Stabilized domain, no inversion.
    Anscombe,
    /// Detector pixel values (photons × gain).
    #[default]
    Counts,
    /// Pixel values over the input's full scale, clamped to `[0, 1]`.
    Normalized,
}

impl std::str::FromStr for OutputDomain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anscombe" => Ok(Self::Anscombe),
            "counts" => Ok(Self::Counts),
            "normalized" => Ok(Self::Normalized),
            other => Err(Error::Contract(format!("unknown output domain '{other}'"))),
        }
    }
}

/// Runs `denoise` on the Anscombe transform of `noisy` and maps the result
/// into `output`.
pub fn stabilized_denoise<F>(
    noisy: &Image,
    gain: &GainModel,
    output: OutputDomain,
    inverse: InverseMode,
    denoise: F,
) -> Result<Image>
where
    F: FnOnce(&Image) -> Result<Array2<f64>>,
{
    ensure!(
        noisy.domain() == Domain::RawCounts,
        "denoising expects a raw-count image, got {:?}",
        noisy.domain()
    );
    let stabilized = anscombe_forward(&to_photons(noisy, gain)?)?;
    let denoised = denoise(&stabilized)?;
    ensure!(
        denoised.dim() == stabilized.pixels().dim(),
        "denoiser changed the image shape from {:?} to {:?}",
        stabilized.pixels().dim(),
        denoised.dim()
    );
    let ans = Image::new(denoised, Domain::Anscombe, None)?;
    if output == OutputDomain::Anscombe {
        return Ok(ans.with_bit_depth(noisy.bit_depth()));
    }
    let photons = anscombe_inverse(&ans, inverse)?;
    let counts = Image::raw(photons.pixels().mapv(|l| l * gain.k), noisy.bit_depth())?;
    match output {
        OutputDomain::Counts => Ok(counts),
        OutputDomain::Normalized => {
            let max = noisy.full_scale().ok_or_else(|| {
                Error::Contract("normalized output needs the input bit depth".into())
            })?;
            Image::new(
                counts.pixels().mapv(|v| (v / max).clamp(0.0, 1.0)),
                Domain::NormalizedUnit,
                noisy.bit_depth(),
            )
        }
        OutputDomain::Anscombe => unreachable!(),
    }
}
