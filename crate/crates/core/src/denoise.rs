//! Denoising engines: the pluggable prior used by the reconstruction loop.
//!
//! Built-ins are identity, separable Gaussian blur and patch-based
//! non-local means; heavier engines (e.g. BM3D) plug in through the
//! `external` kind, a subprocess receiving an input and an output path in
//! the portable float format.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataio::{load_pfi, save_pfi};
use crate::image::{clip01_f64, Image};
use crate::{Error, Result};

/// Denoiser selection and strength parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DenoiserSpec {
    /// Passes the input through unchanged.
    Identity,
    /// Separable Gaussian blur with standard deviation `sigma_blur` pixels.
    Gaussian { sigma_blur: f64 },
    /// Non-local means. `filtering_h` controls the weight decay;
    /// `noise_sigma` is the assumed noise level, subtracted from patch
    /// distances so that equally noisy matches of the same underlying patch
    /// get full weight.
    Nlm {
        patch_size: usize,
        search_window: usize,
        filtering_h: f64,
        noise_sigma: f64,
    },
    /// Subprocess invocation; `{input}` and `{output}` placeholders in the
    /// argument list are replaced with .pfi paths.
    External { command: Vec<String> },
}

impl DenoiserSpec {
    /// Non-local means with the conventional defaults for a known noise
    /// level: 7x7 patches, 21x21 search window, h = 0.8 * sigma.
    pub fn nlm_default(noise_sigma: f64) -> Self {
        DenoiserSpec::Nlm {
            patch_size: 7,
            search_window: 21,
            filtering_h: 0.8 * noise_sigma,
            noise_sigma,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            DenoiserSpec::Identity | DenoiserSpec::External { .. } => Ok(()),
            DenoiserSpec::Gaussian { sigma_blur } => {
                if *sigma_blur > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter {
                        name: "sigma_blur",
                        reason: format!("must be positive, got {sigma_blur}"),
                    })
                }
            }
            DenoiserSpec::Nlm {
                patch_size,
                search_window,
                filtering_h,
                noise_sigma,
            } => {
                if patch_size % 2 == 0 || search_window % 2 == 0 {
                    return Err(Error::InvalidParameter {
                        name: "patch_size",
                        reason: "patch_size and search_window must be odd".into(),
                    });
                }
                if patch_size >= search_window {
                    return Err(Error::InvalidParameter {
                        name: "patch_size",
                        reason: format!(
                            "patch_size {patch_size} must be smaller than search_window {search_window}"
                        ),
                    });
                }
                if !(*filtering_h > 0.0) {
                    return Err(Error::InvalidParameter {
                        name: "filtering_h",
                        reason: format!("must be positive, got {filtering_h}"),
                    });
                }
                if !(*noise_sigma >= 0.0) {
                    return Err(Error::InvalidParameter {
                        name: "noise_sigma",
                        reason: format!("must be non-negative, got {noise_sigma}"),
                    });
                }
                Ok(())
            }
        }
    }
}

/// Runs the selected denoiser. Output has the input's dimensions and is
/// clipped to `[0, 1]`; identity returns the input unchanged.
pub fn denoise(img: &Image, spec: &DenoiserSpec) -> Result<Image> {
    spec.validate()?;
    match spec {
        DenoiserSpec::Identity => Ok(img.clone()),
        DenoiserSpec::Gaussian { sigma_blur } => Ok(gaussian_blur(img, *sigma_blur)),
        DenoiserSpec::Nlm {
            patch_size,
            search_window,
            filtering_h,
            noise_sigma,
        } => Ok(nlm(img, *patch_size, *search_window, *filtering_h, *noise_sigma)),
        DenoiserSpec::External { command } => external(img, command),
    }
}

/// Reflect-pads a grid by `pad` on every side (edge mirrored without
/// repeating the border pixel).
fn reflect_pad(src: &Array2<f64>, pad: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        // Bounce until inside; pad < n always holds for our callers.
        loop {
            if i < 0 {
                i = -i;
            } else if i >= n {
                i = 2 * n - 2 - i;
            } else {
                return i as usize;
            }
        }
    };
    Array2::from_shape_fn((h + 2 * pad, w + 2 * pad), |(r, c)| {
        src[[
            reflect(r as isize - pad as isize, h),
            reflect(c as isize - pad as isize, w),
        ]]
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let kernel = gaussian_kernel(sigma);
    let radius = kernel.len() / 2;
    let src = img.to_f64();
    let (h, w) = src.dim();
    let padded = reflect_pad(&src, radius);
    // Horizontal pass.
    let mut tmp = Array2::<f64>::zeros((h + 2 * radius, w));
    for r in 0..h + 2 * radius {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * padded[[r, c + k]];
            }
            tmp[[r, c]] = acc;
        }
    }
    // Vertical pass.
    let mut out = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[[r + k, c]];
            }
            out[[r, c]] = acc;
        }
    }
    clip01_f64(&out)
}

/// Non-local means with per-offset integral images: for each search offset
/// the squared-difference image is prefix-summed once, making every patch
/// distance an O(1) lookup.
fn nlm(img: &Image, patch_size: usize, search_window: usize, h: f64, noise_sigma: f64) -> Image {
    let src = img.to_f64();
    let (height, width) = src.dim();
    let pr = patch_size / 2;
    let sr = search_window / 2;
    let pad = pr + sr;
    let padded = reflect_pad(&src, pad);

    let n_patch = (patch_size * patch_size) as f64;
    let h2 = h * h;
    let two_sigma2 = 2.0 * noise_sigma * noise_sigma;

    let mut weight_sum = Array2::<f64>::zeros((height, width));
    let mut value_sum = Array2::<f64>::zeros((height, width));

    let (ph, pw) = padded.dim();
    for dy in -(sr as isize)..=(sr as isize) {
        for dx in -(sr as isize)..=(sr as isize) {
            // Squared difference between the padded image and its shifted
            // copy, over the region where both are defined.
            let oh = ph - dy.unsigned_abs();
            let ow = pw - dx.unsigned_abs();
            let y0 = dy.max(0) as usize;
            let x0 = dx.max(0) as usize;
            let sy = (-dy).max(0) as usize;
            let sx = (-dx).max(0) as usize;
            let mut diff2 = Array2::<f64>::zeros((oh, ow));
            for r in 0..oh {
                for c in 0..ow {
                    let d = padded[[r + sy, c + sx]] - padded[[r + y0, c + x0]];
                    diff2[[r, c]] = d * d;
                }
            }
            let integral = crate::metrics::integral(&diff2);

            // Pixel (r, c) of the original sits at (r + pad, c + pad) in the
            // padded frame, i.e. (r + pad - sy, c + pad - sx) in diff2; its
            // patch starts pr earlier on both axes.
            for r in 0..height {
                let dr = r + pad - sy - pr;
                let vr = (r + pad).wrapping_add_signed(dy);
                for c in 0..width {
                    let dc = c + pad - sx - pr;
                    let sum = integral[[dr + patch_size, dc + patch_size]]
                        - integral[[dr, dc + patch_size]]
                        - integral[[dr + patch_size, dc]]
                        + integral[[dr, dc]];
                    let dist = (sum / n_patch - two_sigma2).max(0.0);
                    let wgt = (-dist / h2).exp();
                    weight_sum[[r, c]] += wgt;
                    value_sum[[r, c]] += wgt * padded[[vr, (c + pad).wrapping_add_signed(dx)]];
                }
            }
        }
    }

    let out = &value_sum / &weight_sum;
    clip01_f64(&out)
}

fn external(img: &Image, command: &[String]) -> Result<Image> {
    if command.is_empty() {
        return Err(Error::InvalidParameter {
            name: "command",
            reason: "external denoiser command is empty".into(),
        });
    }
    let dir = tempfile_dir()?;
    let input = dir.join("denoise_in.pfi");
    let output = dir.join("denoise_out.pfi");
    save_pfi(img, &input)?;

    let args: Vec<String> = command
        .iter()
        .map(|a| {
            a.replace("{input}", &input.to_string_lossy())
                .replace("{output}", &output.to_string_lossy())
        })
        .collect();
    let rendered = args.join(" ");
    let result = std::process::Command::new(&args[0]).args(&args[1..]).output();
    let cleanup = |e: Error| {
        let _ = std::fs::remove_dir_all(&dir);
        e
    };
    let out = result.map_err(|e| {
        cleanup(Error::ExternalDenoiser {
            command: rendered.clone(),
            detail: format!("failed to launch: {e}"),
        })
    })?;
    if !out.status.success() {
        return Err(cleanup(Error::ExternalDenoiser {
            command: rendered,
            detail: format!(
                "exit status {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            ),
        }));
    }
    let denoised = load_pfi(&output).map_err(|e| {
        cleanup(Error::ExternalDenoiser {
            command: rendered.clone(),
            detail: format!("output missing or malformed: {e}"),
        })
    })?;
    let _ = std::fs::remove_dir_all(&dir);
    img.check_same_shape(&denoised).map_err(|_| Error::ExternalDenoiser {
        command: args.join(" "),
        detail: format!(
            "output dimensions {}x{} do not match input {}x{}",
            denoised.height(),
            denoised.width(),
            img.height(),
            img.width()
        ),
    })?;
    Ok(crate::image::clip01(&denoised))
}

fn tempfile_dir() -> Result<std::path::PathBuf> {
    let base = std::env::temp_dir();
    // One directory per invocation; the pid/time pair avoids collisions
    // between concurrent pipelines.
    let unique = format!(
        "rnst-ext-{}-{:x}",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or(0)
    );
    let dir = base.join(unique);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}
