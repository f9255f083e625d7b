//! Image representation, file I/O, normalization and patch extraction.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng;

/// Side length of training patches.
pub const DEFAULT_PATCH_SIZE: usize = 64;
/// Patches sampled per image (100 images give 40,000 patches).
pub const DEFAULT_PATCHES_PER_IMAGE: usize = 400;

/// Value domain an [`Image`] lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// Detector pixel values, `>= 0`.
    RawCounts,
    /// Pixel values divided by the full-scale value, in `[0, 1]`.
    NormalizedUnit,
    /// Output of the Anscombe transform.
    Anscombe,
}

/// 2D grayscale intensity grid, indexed `[row, col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Array2<f64>,
    domain: Domain,
    bit_depth: Option<u32>,
}

impl Image {
    /// Wraps `pixels` after checking the invariants of `domain`.
    pub fn new(pixels: Array2<f64>, domain: Domain, bit_depth: Option<u32>) -> Result<Self> {
        let (h, w) = pixels.dim();
        ensure!(h > 0 && w > 0, "image must be non-empty, got {h}x{w}");
        if let Some(bd) = bit_depth {
            ensure!((1..=32).contains(&bd), "bit depth {bd} out of range 1..=32");
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite pixel value {bad}")));
        }
        match domain {
            Domain::RawCounts => {
                if let Some(v) = pixels.iter().find(|&&v| v < 0.0) {
                    return Err(Error::Contract(format!(
                        "raw-count image has negative pixel {v}"
                    )));
                }
            }
            Domain::NormalizedUnit => {
                if let Some(v) = pixels.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
                    return Err(Error::Contract(format!(
                        "normalized image has pixel {v} outside [0, 1]"
                    )));
                }
            }
            Domain::Anscombe => {}
        }
        Ok(Self {
            pixels,
            domain,
            bit_depth,
        })
    }

    pub fn raw(pixels: Array2<f64>, bit_depth: Option<u32>) -> Result<Self> {
        Self::new(pixels, Domain::RawCounts, bit_depth)
    }

    pub fn filled(height: usize, width: usize, value: f64, domain: Domain) -> Result<Self> {
        Self::new(Array2::from_elem((height, width), value), domain, None)
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn bit_depth(&self) -> Option<u32> {
        self.bit_depth
    }

    pub fn with_bit_depth(mut self, bit_depth: Option<u32>) -> Self {
        self.bit_depth = bit_depth;
        self
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array2<f64> {
        self.pixels
    }

    /// Full-scale value implied by the bit depth, `2^bd - 1`.
    pub fn full_scale(&self) -> Option<f64> {
        self.bit_depth.map(|bd| ((1u64 << bd) - 1) as f64)
    }

    /// Copy of the `size x size` block whose top-left corner is `origin`.
    pub fn crop(&self, origin: (usize, usize), height: usize, width: usize) -> Result<Image> {
        let (r, c) = origin;
        ensure!(
            r + height <= self.height() && c + width <= self.width(),
            "crop {height}x{width} at ({r}, {c}) exceeds {}x{} image",
            self.height(),
            self.width()
        );
        Ok(Image {
            pixels: self.pixels.slice(s![r..r + height, c..c + width]).to_owned(),
            domain: self.domain,
            bit_depth: self.bit_depth,
        })
    }
}

/// On-disk image encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageFormat {
    /// Binary PGM (`P5`); two big-endian bytes per sample when maxval > 255.
    Pgm16,
    /// 16-bit grayscale PNG.
    Png16,
    /// `u32` width and `u32` height (little-endian), then row-major `f64` LE samples.
    RawF64,
}

impl ImageFormat {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "pgm" => Some(Self::Pgm16),
            "png" => Some(Self::Png16),
            "f64" | "raw" | "bin" => Some(Self::RawF64),
            _ => None,
        }
    }
}

impl std::str::FromStr for ImageFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgm16" | "pgm" => Ok(Self::Pgm16),
            "png16" | "png" => Ok(Self::Png16),
            "raw_f64" | "raw" | "f64" => Ok(Self::RawF64),
            other => Err(Error::Format(format!("unknown image format '{other}'"))),
        }
    }
}

/// Reads an image as `raw_counts`.
pub fn load_image(path: &Path, format: ImageFormat) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        ImageFormat::Pgm16 => decode_pgm(&bytes),
        ImageFormat::Png16 => decode_png(&bytes),
        ImageFormat::RawF64 => decode_raw_f64(&bytes),
    }
}

/// Writes `img`. Integer formats round to the nearest integer and require
/// values in `[0, maxval]`, where maxval comes from the bit depth (16-bit
/// when absent).
pub fn save_image(img: &Image, path: &Path, format: ImageFormat) -> Result<()> {
    let bytes = match format {
        ImageFormat::Pgm16 => encode_pgm(img)?,
        ImageFormat::Png16 => encode_png(img)?,
        ImageFormat::RawF64 => encode_raw_f64(img),
    };
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(&bytes)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

fn bit_depth_for_maxval(maxval: u32) -> u32 {
    32 - maxval.leading_zeros()
}

fn integer_samples(img: &Image, maxval: u32) -> Result<Vec<u16>> {
    ensure!(
        img.domain() == Domain::RawCounts,
        "integer formats store raw counts, got {:?}",
        img.domain()
    );
    img.pixels()
        .iter()
        .map(|&v| {
            let r = v.round();
            if r < 0.0 || r > maxval as f64 {
                Err(Error::Format(format!("pixel {v} outside [0, {maxval}]")))
            } else {
                Ok(r as u16)
            }
        })
        .collect()
}

fn integer_maxval(img: &Image) -> Result<u32> {
    let bd = img.bit_depth().unwrap_or(16);
    ensure!(bd <= 16, "integer formats hold at most 16 bits, got {bd}");
    Ok((1u32 << bd) - 1)
}

fn encode_pgm(img: &Image) -> Result<Vec<u8>> {
    let maxval = integer_maxval(img)?;
    let samples = integer_samples(img, maxval)?;
    let mut out = format!("P5\n{} {}\n{}\n", img.width(), img.height(), maxval).into_bytes();
    if maxval > 255 {
        for s in samples {
            out.extend_from_slice(&s.to_be_bytes());
        }
    } else {
        out.extend(samples.into_iter().map(|s| s as u8));
    }
    Ok(out)
}

fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0usize;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens[0] != "P5" {
        return Err(Error::Format(format!("expected P5 magic, got '{}'", tokens[0])));
    }
    let parse = |t: &str, what: &str| {
        t.parse::<u32>()
            .map_err(|_| Error::Format(format!("bad PGM {what} '{t}'")))
    };
    let width = parse(&tokens[1], "width")? as usize;
    let height = parse(&tokens[2], "height")? as usize;
    let maxval = parse(&tokens[3], "maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!(
            "invalid PGM geometry {width}x{height} maxval {maxval}"
        )));
    }
    // exactly one whitespace byte separates header from raster
    pos += 1;
    let bps = if maxval > 255 { 2 } else { 1 };
    let need = width * height * bps;
    if bytes.len() < pos + need {
        return Err(Error::Format(format!(
            "truncated PGM raster: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    let raster = &bytes[pos..pos + need];
    let values: Vec<f64> = if bps == 2 {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64)
            .collect()
    } else {
        raster.iter().map(|&b| b as f64).collect()
    };
    if let Some(v) = values.iter().find(|&&v| v > maxval as f64) {
        return Err(Error::Format(format!("sample {v} exceeds maxval {maxval}")));
    }
    let pixels = Array2::from_shape_vec((height, width), values)
        .map_err(|e| Error::Format(e.to_string()))?;
    Image::raw(pixels, Some(bit_depth_for_maxval(maxval)))
}

fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let maxval = integer_maxval(img)?;
    let samples = integer_samples(img, maxval)?;
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Format(e.to_string()))?;
        let data: Vec<u8> = samples.iter().flat_map(|s| s.to_be_bytes()).collect();
        writer
            .write_image_data(&data)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(out)
}

fn decode_png(bytes: &[u8]) -> Result<Image> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::Format(format!(
            "expected 16-bit grayscale PNG, got {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(width * height * 2)];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(e.to_string()))?;
    let values: Vec<f64> = buf[..frame.buffer_size()]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64)
        .collect();
    let pixels = Array2::from_shape_vec((height, width), values)
        .map_err(|e| Error::Format(e.to_string()))?;
    Image::raw(pixels, Some(16))
}

fn encode_raw_f64(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + img.width() * img.height() * 8);
    out.extend_from_slice(&(img.width() as u32).to_le_bytes());
    out.extend_from_slice(&(img.height() as u32).to_le_bytes());
    for v in img.pixels().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_raw_f64(bytes: &[u8]) -> Result<Image> {
    let mut rd = BufReader::new(bytes);
    let mut word = [0u8; 4];
    let mut read_u32 = |rd: &mut BufReader<&[u8]>| -> Result<u32> {
        rd.read_exact(&mut word)
            .map_err(|_| Error::Format("truncated raw_f64 header".into()))?;
        Ok(u32::from_le_bytes(word))
    };
    let width = read_u32(&mut rd)? as usize;
    let height = read_u32(&mut rd)? as usize;
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("invalid geometry {width}x{height}")));
    }
    let body = &bytes[8..];
    if body.len() != width * height * 8 {
        return Err(Error::Format(format!(
            "raw_f64 body holds {} bytes, expected {}",
            body.len(),
            width * height * 8
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let pixels = Array2::from_shape_vec((height, width), values)
        .map_err(|e| Error::Format(e.to_string()))?;
    Image::raw(pixels, None)
}

/// Maps raw counts to `[0, 1]` by dividing by `2^bit_depth - 1`.
pub fn normalize(img: &Image) -> Result<Image> {
    let max = img.full_scale().ok_or_else(|| {
        Error::Contract("normalize needs a bit depth or an explicit maximum".into())
    })?;
    normalize_with_max(img, max)
}

/// Divides raw counts by `max`.
pub fn normalize_with_max(img: &Image, max: f64) -> Result<Image> {
    ensure!(
        img.domain() == Domain::RawCounts,
        "normalize expects raw counts, got {:?}",
        img.domain()
    );
    ensure!(max > 0.0 && max.is_finite(), "normalization maximum must be positive, got {max}");
    Image::new(img.pixels().mapv(|v| v / max), Domain::NormalizedUnit, img.bit_depth())
}

/// Inverse of [`normalize_with_max`].
pub fn denormalize(img: &Image, max: f64) -> Result<Image> {
    ensure!(
        img.domain() == Domain::NormalizedUnit,
        "denormalize expects a normalized image, got {:?}",
        img.domain()
    );
    ensure!(max > 0.0 && max.is_finite(), "normalization maximum must be positive, got {max}");
    Image::new(img.pixels().mapv(|v| v * max), Domain::RawCounts, img.bit_depth())
}

/// Square crop of a source image used for training.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub pixels: Array2<f64>,
    /// Index of the source image within its split.
    pub source_id: usize,
    /// `(row, col)` of the top-left corner in the source image.
    pub origin: (usize, usize),
}

impl Patch {
    pub fn size(&self) -> usize {
        self.pixels.nrows()
    }

    /// The patch as a raw-count image.
    pub fn to_image(&self) -> Result<Image> {
        Image::raw(self.pixels.clone(), None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchStrategy {
    /// Uniform random top-left corners.
    Random,
    /// Non-overlapping tiles in row-major order, cycling when `count`
    /// exceeds the number of tiles.
    Grid,
}

/// How patches are drawn from each image of a split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchSampling {
    pub patch_size: usize,
    pub per_image: usize,
    pub strategy: PatchStrategy,
}

impl Default for PatchSampling {
    fn default() -> Self {
        Self {
            patch_size: DEFAULT_PATCH_SIZE,
            per_image: DEFAULT_PATCHES_PER_IMAGE,
            strategy: PatchStrategy::Random,
        }
    }
}

/// Extracts `count` square patches from `img`, tagging them with `source_id`.
pub fn extract_patches(
    img: &Image,
    source_id: usize,
    patch_size: usize,
    count: usize,
    strategy: PatchStrategy,
    seed: u64,
) -> Result<Vec<Patch>> {
    ensure!(patch_size >= 1, "patch size must be positive");
    ensure!(
        patch_size <= img.width().min(img.height()),
        "patch size {patch_size} exceeds image {}x{}",
        img.height(),
        img.width()
    );
    ensure!(count >= 1, "patch count must be at least 1");
    let max_r = img.height() - patch_size;
    let max_c = img.width() - patch_size;
    let origins: Vec<(usize, usize)> = match strategy {
        PatchStrategy::Random => {
            let mut rng = rng::stream(seed);
            (0..count)
                .map(|_| (rng.random_range(0..=max_r), rng.random_range(0..=max_c)))
                .collect()
        }
        PatchStrategy::Grid => {
            let rows = img.height() / patch_size;
            let cols = img.width() / patch_size;
            (0..count)
                .map(|i| {
                    let t = i % (rows * cols);
                    ((t / cols) * patch_size, (t % cols) * patch_size)
                })
                .collect()
        }
    };
    Ok(origins
        .into_iter()
        .map(|(r, c)| Patch {
            pixels: img
                .pixels()
                .slice(s![r..r + patch_size, c..c + patch_size])
                .to_owned(),
            source_id,
            origin: (r, c),
        })
        .collect())
}

/// Disjoint training and validation splits with their patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train_images: Vec<Image>,
    pub val_images: Vec<Image>,
    pub train_patches: Vec<Patch>,
    pub val_patches: Vec<Patch>,
    pub split_seed: u64,
}

impl Dataset {
    /// Builds a dataset and samples patches from both splits.
    pub fn new(
        train_images: Vec<Image>,
        val_images: Vec<Image>,
        sampling: &PatchSampling,
        split_seed: u64,
    ) -> Result<Self> {
        let sample = |images: &[Image], label: &str| -> Result<Vec<Patch>> {
            let base = rng::derive_named(split_seed, label);
            let mut out = Vec::with_capacity(images.len() * sampling.per_image);
            for (i, img) in images.iter().enumerate() {
                out.extend(extract_patches(
                    img,
                    i,
                    sampling.patch_size,
                    sampling.per_image,
                    sampling.strategy,
                    rng::derive_seed(base, &[i as u64]),
                )?);
            }
            Ok(out)
        };
        let train_patches = sample(&train_images, "train-patches")?;
        let val_patches = sample(&val_images, "val-patches")?;
        Ok(Self {
            train_images,
            val_images,
            train_patches,
            val_patches,
            split_seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> Image {
        Image::raw(
            Array2::from_shape_fn((h, w), |(r, c)| (r * w + c) as f64),
            Some(16),
        )
        .unwrap()
    }

    #[test]
    fn rejects_invalid_domains() {
        assert!(Image::filled(2, 2, -1.0, Domain::RawCounts).is_err());
        assert!(Image::filled(2, 2, 1.5, Domain::NormalizedUnit).is_err());
        assert!(Image::filled(2, 2, -1.5, Domain::Anscombe).is_ok());
        assert!(Image::filled(0, 2, 0.0, Domain::Anscombe).is_err());
        assert!(Image::filled(2, 2, f64::NAN, Domain::Anscombe).is_err());
    }

    #[test]
    fn normalize_full_scale_and_zero() {
        let px = Array2::from_shape_vec((1, 3), vec![0.0, 65535.0, 1000.0]).unwrap();
        let img = Image::raw(px, Some(16)).unwrap();
        let n = normalize(&img).unwrap();
        assert_eq!(n.pixels()[[0, 0]], 0.0);
        assert_eq!(n.pixels()[[0, 1]], 1.0);
        let back = denormalize(&n, 65535.0).unwrap();
        for (a, b) in back.pixels().iter().zip(img.pixels()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_requires_bit_depth() {
        let img = Image::filled(2, 2, 5.0, Domain::RawCounts).unwrap();
        assert!(matches!(normalize(&img), Err(Error::Contract(_))));
        assert!(normalize_with_max(&img, 10.0).is_ok());
    }

    #[test]
    fn grid_patch_of_exact_size_is_whole_image() {
        let img = ramp(64, 64);
        let p = extract_patches(&img, 0, 64, 1, PatchStrategy::Grid, 0).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].origin, (0, 0));
        assert_eq!(&p[0].pixels, img.pixels());
    }

    #[test]
    fn random_patches_are_seeded() {
        let img = ramp(100, 90);
        let a = extract_patches(&img, 0, 16, 20, PatchStrategy::Random, 11).unwrap();
        let b = extract_patches(&img, 0, 16, 20, PatchStrategy::Random, 11).unwrap();
        let c = extract_patches(&img, 0, 16, 20, PatchStrategy::Random, 12).unwrap();
        let oa: Vec<_> = a.iter().map(|p| p.origin).collect();
        assert_eq!(oa, b.iter().map(|p| p.origin).collect::<Vec<_>>());
        assert_ne!(oa, c.iter().map(|p| p.origin).collect::<Vec<_>>());
    }

    #[test]
    fn oversized_patch_is_rejected() {
        let img = ramp(32, 40);
        assert!(matches!(
            extract_patches(&img, 0, 33, 1, PatchStrategy::Random, 0),
            Err(Error::Contract(_))
        ));
        assert!(extract_patches(&img, 0, 8, 0, PatchStrategy::Grid, 0).is_err());
    }

    #[test]
    fn dataset_patch_counts_scale_with_images() {
        let sampling = PatchSampling {
            patch_size: 8,
            per_image: 400,
            strategy: PatchStrategy::Random,
        };
        let train = vec![ramp(16, 16); 5];
        let val = vec![ramp(16, 16); 2];
        let ds = Dataset::new(train, val, &sampling, 3).unwrap();
        assert_eq!(ds.train_patches.len(), 2000);
        assert_eq!(ds.val_patches.len(), 800);
        assert!(ds.train_patches.iter().all(|p| p.source_id < 5));
        assert!(ds.val_patches.iter().all(|p| p.source_id < 2));
    }

    #[test]
    fn truncated_pgm_is_a_format_error() {
        let img = ramp(4, 4);
        let bytes = encode_pgm(&img).unwrap();
        assert!(matches!(
            decode_pgm(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
        assert!(matches!(decode_pgm(b"P5\n4 4"), Err(Error::Format(_))));
        assert!(matches!(decode_raw_f64(&[1, 0, 0]), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn patches_match_source_blocks(
            h in 8usize..40, w in 8usize..40, size in 1usize..8, count in 1usize..10, seed in any::<u64>(),
            grid in any::<bool>(),
        ) {
            let img = ramp(h, w);
            let strategy = if grid { PatchStrategy::Grid } else { PatchStrategy::Random };
            let patches = extract_patches(&img, 2, size, count, strategy, seed).unwrap();
            prop_assert_eq!(patches.len(), count);
            for p in patches {
                let (r, c) = p.origin;
                prop_assert!(r + size <= h && c + size <= w);
                prop_assert_eq!(p.pixels.dim(), (size, size));
                prop_assert_eq!(&p.pixels, &img.pixels().slice(s![r..r + size, c..c + size]).to_owned());
            }
        }

        #[test]
        fn normalize_is_strictly_monotonic(a in 0u32..65535, b in 0u32..65535) {
            prop_assume!(a < b);
            let px = Array2::from_shape_vec((1, 2), vec![a as f64, b as f64]).unwrap();
            let n = normalize(&Image::raw(px, Some(16)).unwrap()).unwrap();
            prop_assert!(n.pixels()[[0, 0]] < n.pixels()[[0, 1]]);
        }
    }
}
