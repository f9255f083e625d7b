use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{ensure, Result};
use crate::image::Image;
use crate::noise::{GainModel, InverseMode};
pub use crate::pipeline::OutputDomain;
use crate::pipeline::stabilized_denoise;
use crate::tensor::Tensor;

pub const DEFAULT_TILE: usize = 64;
pub const DEFAULT_TILE_OVERLAP: usize = 16;
const TILE_BATCH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tiling {
    /// One pass over the full image.
    Whole,
    /// Overlapping square tiles, linearly blended across the overlap.
    Tiled { tile: usize, overlap: usize },
}

impl Default for Tiling {
    fn default() -> Self {
        Tiling::Tiled {
            tile: DEFAULT_TILE,
            overlap: DEFAULT_TILE_OVERLAP,
        }
    }
}

/// Tile start offsets covering `[0, extent)`.
fn tile_starts(extent: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if extent <= tile {
        return vec![0];
    }
    let stride = tile - overlap;
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + tile < extent).collect();
    starts.push(extent - tile);
    starts
}

/// Blend weight ramp: rises linearly over `overlap` pixels at each edge.
fn ramp(i: usize, n: usize, overlap: usize) -> f64 {
    (i + 1).min(n - i).min(overlap + 1) as f64
}

/// Predicts the noise map of an Anscombe-domain image.
pub(crate) fn predict_noise(model: &Model, img: &Array2<f64>, tiling: Tiling) -> Result<Array2<f64>> {
    let (h, w) = img.dim();
    let (tile, overlap) = match tiling {
        Tiling::Whole => {
            let x = Tensor::from_vec([1, 1, h, w], img.iter().copied().collect())?;
            return Ok(model.infer(&x)?.plane(0));
        }
        Tiling::Tiled { tile, overlap } => (tile, overlap),
    };
    ensure!(tile > overlap, "tile size {tile} must exceed overlap {overlap}");
    let (th, tw) = (tile.min(h), tile.min(w));
    let origins: Vec<(usize, usize)> = tile_starts(h, th, overlap)
        .into_iter()
        .flat_map(|r| tile_starts(w, tw, overlap).into_iter().map(move |c| (r, c)))
        .collect();

    let mut acc = Array2::<f64>::zeros((h, w));
    let mut weight = Array2::<f64>::zeros((h, w));
    let mut single = Array2::<f64>::zeros((h, w));
    let mut covered = Array2::<u32>::zeros((h, w));
    for chunk in origins.chunks(TILE_BATCH) {
        let planes: Vec<Array2<f64>> = chunk
            .iter()
            .map(|&(r, c)| img.slice(s![r..r + th, c..c + tw]).to_owned())
            .collect();
        let pred = model.infer(&Tensor::stack_planes(&planes)?)?;
        for (i, &(r, c)) in chunk.iter().enumerate() {
            let p = pred.plane(i);
            for ((y, x), &v) in p.indexed_iter() {
                let wgt = ramp(y, th, overlap) * ramp(x, tw, overlap);
                let at = [r + y, c + x];
                acc[at] += wgt * v;
                weight[at] += wgt;
                single[at] = v;
                covered[at] += 1;
            }
        }
    }
    Ok(Array2::from_shape_fn((h, w), |at| {
        if covered[at] == 1 {
            single[at]
        } else {
            acc[at] / weight[at]
        }
    }))
}

/// Options for [`denoise_image`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DenoiseOptions {
    pub output_domain: OutputDomain,
    pub inverse: InverseMode,
    pub tiling: Tiling,
}

/// Denoises a raw-count image: photons, Anscombe, `y - V̂`, then the
/// requested output domain.
pub fn denoise_image(
    model: &Model,
    noisy: &Image,
    gain: &GainModel,
    options: &DenoiseOptions,
) -> Result<Image> {
    stabilized_denoise(noisy, gain, options.output_domain, options.inverse, |y| {
        let v_hat = predict_noise(model, y.pixels(), options.tiling)?;
        Ok(y.pixels() - &v_hat)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Domain;
    use crate::network::{build_model, ModelConfig};

    fn small() -> ModelConfig {
        ModelConfig {
            num_blocks: 1,
            channels: 4,
            ..ModelConfig::default()
        }
    }

    fn textured(h: usize, w: usize) -> Image {
        Image::raw(
            Array2::from_shape_fn((h, w), |(r, c)| 500.0 + 100.0 * ((r as f64 * 0.3).sin() + (c as f64 * 0.2).cos())),
            Some(12),
        )
        .unwrap()
    }

    #[test]
    fn tile_starts_cover_extent() {
        assert_eq!(tile_starts(64, 64, 16), vec![0]);
        assert_eq!(tile_starts(40, 64, 16), vec![0]);
        assert_eq!(tile_starts(100, 64, 16), vec![0, 36]);
        assert_eq!(tile_starts(160, 64, 16), vec![0, 48, 96]);
    }

    #[test]
    fn zeroed_tail_is_identity() {
        let mut m = build_model(&small(), 1).unwrap();
        m.zero_tail();
        let img = textured(70, 90);
        let opts = DenoiseOptions {
            output_domain: OutputDomain::Counts,
            inverse: InverseMode::Algebraic,
            tiling: Tiling::default(),
        };
        let out = denoise_image(&m, &img, &GainModel::known(2.0).unwrap(), &opts).unwrap();
        for (a, b) in out.pixels().iter().zip(img.pixels()) {
            assert!((a - b).abs() < 1e-9);
        }
        let ans = denoise_image(
            &m,
            &img,
            &GainModel::known(2.0).unwrap(),
            &DenoiseOptions { output_domain: OutputDomain::Anscombe, ..opts },
        )
        .unwrap();
        assert_eq!(ans.domain(), Domain::Anscombe);
    }

    #[test]
    fn single_tile_equals_whole_image() {
        let m = build_model(&small(), 2).unwrap();
        let img = textured(64, 64);
        let gain = GainModel::known(1.0).unwrap();
        let mut opts = DenoiseOptions::default();
        let tiled = denoise_image(&m, &img, &gain, &opts).unwrap();
        opts.tiling = Tiling::Whole;
        assert_eq!(tiled, denoise_image(&m, &img, &gain, &opts).unwrap());
    }

    #[test]
    fn blended_tiles_stay_close_to_whole_image() {
        let m = build_model(&small(), 3).unwrap();
        let img = anscombe_like(100, 130);
        let whole = predict_noise(&m, &img, Tiling::Whole).unwrap();
        let tiled = predict_noise(&m, &img, Tiling::default()).unwrap();
        // interior of the first tile sees the same receptive field
        for r in 0..30 {
            for c in 0..40 {
                assert!((whole[[r, c]] - tiled[[r, c]]).abs() < 1e-9);
            }
        }
        assert!(tiled.iter().all(|v| v.is_finite()));
    }

    fn anscombe_like(h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |(r, c)| 20.0 + ((r * 31 + c * 17) % 7) as f64 * 0.3)
    }

    #[test]
    fn normalized_output_is_in_unit_range() {
        let m = build_model(&small(), 4).unwrap();
        let out = denoise_image(
            &m,
            &textured(32, 32),
            &GainModel::known(1.0).unwrap(),
            &DenoiseOptions {
                output_domain: OutputDomain::Normalized,
                ..DenoiseOptions::default()
            },
        )
        .unwrap();
        assert_eq!(out.domain(), Domain::NormalizedUnit);
    }
}
