//! Synthetic piecewise-constant ellipse phantoms.
//!
//! Desk-scale stand-in for paired low/high-quality acquisitions: the clean
//! target is a Shepp-Logan-style head phantom, the degraded input applies a
//! gamma contrast remap plus additive Gaussian noise, and the guidance image
//! is a second phantom with the same intensity levels but deliberately
//! different ellipse geometry, so its content never matches the target.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::image::{add_awgn, Image, NoiseSpec};
use crate::{Error, Result};

/// Parameters for one synthetic phantom pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// Square side length in pixels, at least 64.
    pub size: usize,
    /// Intensity remap exponent applied to the degraded copy; values above 1
    /// darken midtones, simulating a contrast shift between acquisitions.
    pub contrast_gamma: f64,
    pub noise: NoiseSpec,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    value: f64,
    a: f64,
    b: f64,
    x0: f64,
    y0: f64,
    /// rotation in radians
    phi: f64,
}

/// Modified Shepp-Logan ellipse set (Toft's intensity values), summing to
/// intensities inside [0, 1].
fn base_ellipses() -> Vec<Ellipse> {
    let deg = std::f64::consts::PI / 180.0;
    let table: [(f64, f64, f64, f64, f64, f64); 10] = [
        (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
        (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
        (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
        (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
        (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
        (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
        (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
        (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
        (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
        (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
    ];
    table
        .iter()
        .map(|&(value, a, b, x0, y0, phi)| Ellipse {
            value,
            a,
            b,
            x0,
            y0,
            phi: phi * deg,
        })
        .collect()
}

/// Splitmix64 step, used to derive independent per-slice RNG seeds.
fn mix_seed(seed: u64, slice: u32, salt: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15_u64.wrapping_mul(slice as u64 + 1))
        .wrapping_add(salt);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn jitter(
    ellipses: &mut [Ellipse],
    rng: &mut ChaCha12Rng,
    center_amp: f64,
    angle_amp: f64,
    axis_amp: f64,
    damp_first: usize,
) {
    for (i, e) in ellipses.iter_mut().enumerate() {
        // Damped ellipses (the outer "skull" pair) move less so the head
        // stays framed and the bright ring keeps its area.
        let scale = if i < damp_first { 0.25 } else { 1.0 };
        e.x0 += rng.random_range(-center_amp..=center_amp) * scale;
        e.y0 += rng.random_range(-center_amp..=center_amp) * scale;
        e.phi += rng.random_range(-angle_amp..=angle_amp) * scale;
        e.a *= 1.0 + rng.random_range(-axis_amp..=axis_amp) * scale;
        e.b *= 1.0 + rng.random_range(-axis_amp..=axis_amp) * scale;
    }
}

fn rasterize(ellipses: &[Ellipse], size: usize) -> Image {
    let mut grid = Array2::<f64>::zeros((size, size));
    let step = 2.0 / size as f64;
    for r in 0..size {
        // Row 0 is the top of the image, y = +1 end of the phantom frame.
        let y = 1.0 - (r as f64 + 0.5) * step;
        for c in 0..size {
            let x = -1.0 + (c as f64 + 0.5) * step;
            let mut v = 0.0;
            for e in ellipses {
                let dx = x - e.x0;
                let dy = y - e.y0;
                let (s, co) = e.phi.sin_cos();
                let xr = dx * co + dy * s;
                let yr = -dx * s + dy * co;
                if (xr / e.a).powi(2) + (yr / e.b).powi(2) <= 1.0 {
                    v += e.value;
                }
            }
            grid[[r, c]] = v.clamp(0.0, 1.0);
        }
    }
    Image::new(grid.mapv(|v| v as f32)).expect("size checked by caller")
}

fn content_ellipses(spec: &PhantomSpec, slice: u32) -> Vec<Ellipse> {
    let mut ellipses = base_ellipses();
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(spec.noise.seed, slice, 0xC0));
    jitter(&mut ellipses, &mut rng, 0.04, 0.14, 0.06, 2);
    ellipses
}

fn guidance_ellipses(spec: &PhantomSpec, slice: u32) -> Vec<Ellipse> {
    let mut ellipses = base_ellipses();
    // Mirror left-right, then move the whole head rigidly and scramble the
    // interior features. The skull ring carries most of the bright pixel
    // mass, so it is only transformed rigidly: the guidance keeps the same
    // intensity histogram as a content phantom while its layout differs.
    for e in &mut ellipses {
        e.x0 = -e.x0;
        e.phi = -e.phi;
    }
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(spec.noise.seed, slice, 0x6D));
    let theta: f64 = rng.random_range(-0.5..=0.5);
    let (shift_x, shift_y): (f64, f64) = (
        rng.random_range(-0.05..=0.05),
        rng.random_range(-0.05..=0.05),
    );
    let (ts, tc) = theta.sin_cos();
    for e in &mut ellipses {
        let (x, y) = (e.x0, e.y0);
        e.x0 = x * tc - y * ts + shift_x;
        e.y0 = x * ts + y * tc + shift_y;
        e.phi += theta;
    }
    // Interior features move independently; their intensity deltas are
    // small, so overlaps barely change the histogram.
    jitter(&mut ellipses[2..], &mut rng, 0.1, 0.6, 0.15, 0);
    ellipses
}

fn validate(spec: &PhantomSpec) -> Result<()> {
    if spec.size < 64 {
        return Err(Error::InvalidParameter {
            name: "size",
            reason: format!("phantom size must be at least 64, got {}", spec.size),
        });
    }
    if !(spec.contrast_gamma > 0.0) {
        return Err(Error::InvalidParameter {
            name: "contrast_gamma",
            reason: format!("must be positive, got {}", spec.contrast_gamma),
        });
    }
    Ok(())
}

fn degrade(clean: &Image, spec: &PhantomSpec, slice: u32) -> Result<Image> {
    let remapped = if spec.contrast_gamma == 1.0 {
        clean.clone()
    } else {
        let g = spec.contrast_gamma;
        Image::new(
            clean
                .pixels()
                .mapv(|p| (p as f64).powf(g).clamp(0.0, 1.0) as f32),
        )?
    };
    let noise = NoiseSpec {
        sigma: spec.noise.sigma,
        seed: mix_seed(spec.noise.seed, slice, 0xA3),
    };
    add_awgn(&remapped, &noise)
}

/// Generates one `(clean_high, noisy_low, guidance)` triple.
///
/// `noisy_low = clip(clean_high^gamma) + AWGN`; with `gamma = 1` and
/// `sigma = 0` it is pixel-identical to `clean_high`.
pub fn make_phantom_pair(spec: &PhantomSpec) -> Result<(Image, Image, Image)> {
    make_phantom_slice(spec, 0)
}

/// Slice variant of [`make_phantom_pair`]: each slice index deterministically
/// perturbs the ellipse geometry, mimicking neighboring slices of a volume.
pub fn make_phantom_slice(spec: &PhantomSpec, slice: u32) -> Result<(Image, Image, Image)> {
    validate(spec)?;
    let clean = rasterize(&content_ellipses(spec, slice), spec.size);
    let noisy = degrade(&clean, spec, slice)?;
    let guidance = rasterize(&guidance_ellipses(spec, slice), spec.size);
    Ok((clean, noisy, guidance))
}
