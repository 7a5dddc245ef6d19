//! Core image type, value-range policy and seeded noise corruption.
//!
//! Every image in the pipeline is a single-channel 2-D grid of `f32`
//! intensities normalized to `[0, 1]`. Operations documented as "clipped"
//! clamp their output into that range; intermediate candidates produced by
//! the optimizers may transiently leave it.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Minimum side length: the 7x7 SSIM window and three 2x pooling stages of
/// the feature extractor both need at least 8 pixels per side.
pub const MIN_SIDE: usize = 8;

/// A single-channel image with `f32` intensities, row-major.
///
/// Pixel storage is 32-bit so that the portable float file format
/// round-trips bit-exactly; all numerical kernels promote to `f64`
/// internally.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Array2<f32>,
}

impl Image {
    /// Wraps a pixel array. Fails if either side is smaller than [`MIN_SIDE`].
    pub fn new(pixels: Array2<f32>) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::ImageTooSmall {
                height: h,
                width: w,
                min: MIN_SIDE,
            });
        }
        Ok(Image { pixels })
    }

    /// Builds an image from a row-major pixel vector.
    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let pixels = Array2::from_shape_vec((height, width), data).map_err(|e| {
            Error::InvalidParameter {
                name: "pixels",
                reason: e.to_string(),
            }
        })?;
        Image::new(pixels)
    }

    /// Constant-valued image.
    pub fn constant(height: usize, width: usize, value: f32) -> Result<Self> {
        Image::new(Array2::from_elem((height, width), value))
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn pixels(&self) -> &Array2<f32> {
        &self.pixels
    }

    /// Pixels promoted to `f64`, the precision used by all numeric kernels.
    pub fn to_f64(&self) -> Array2<f64> {
        self.pixels.mapv(|p| p as f64)
    }

    /// Rounds an `f64` pixel grid back into image storage, without clipping.
    pub fn from_f64(values: &Array2<f64>) -> Result<Self> {
        Image::new(values.mapv(|p| p as f32))
    }

    /// True when both images have identical dimensions and bit-identical
    /// pixels (distinguishes NaN payloads, unlike `PartialEq`).
    pub fn bit_eq(&self, other: &Image) -> bool {
        self.pixels.dim() == other.pixels.dim()
            && self
                .pixels
                .iter()
                .zip(other.pixels.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub(crate) fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.pixels.dim() != other.pixels.dim() {
            return Err(Error::DimensionMismatch {
                want_h: self.height(),
                want_w: self.width(),
                got_h: other.height(),
                got_w: other.width(),
            });
        }
        Ok(())
    }
}

/// Additive white Gaussian noise parameters.
///
/// `sigma` is the standard deviation in normalized intensity units
/// (so the common 8-bit level 20/255 is about 0.0784). The generator is
/// pinned to ChaCha12 seeded with `seed`, sampling pixels in row-major
/// order, so corruption is reproducible across runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma: f64, seed: u64) -> Self {
        NoiseSpec { sigma, seed }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma < 1.0) {
            return Err(Error::InvalidParameter {
                name: "sigma",
                reason: format!("must be in [0, 1), got {}", self.sigma),
            });
        }
        Ok(())
    }
}

/// Clamps every pixel into `[0, 1]`. NaN pixels map to 0.
pub fn clip01(img: &Image) -> Image {
    Image {
        pixels: img.pixels.mapv(|p| p.clamp(0.0, 1.0)),
    }
}

/// Clamps an `f64` pixel grid into `[0, 1]` and rounds it into an image.
pub(crate) fn clip01_f64(values: &Array2<f64>) -> Image {
    Image {
        pixels: values.mapv(|p| p.clamp(0.0, 1.0) as f32),
    }
}

/// Adds i.i.d. Gaussian noise per pixel and clips the result to `[0, 1]`.
///
/// `sigma = 0` returns a bit-identical copy. The same `(img, spec)` pair
/// always yields the same output.
pub fn add_awgn(img: &Image, spec: &NoiseSpec) -> Result<Image> {
    spec.validate()?;
    if spec.sigma == 0.0 {
        return Ok(img.clone());
    }
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0f64, spec.sigma).expect("sigma validated above");
    let pixels = img
        .pixels
        .mapv(|p| ((p as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0)) as f32);
    Ok(Image { pixels })
}
