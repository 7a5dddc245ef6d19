//! Quantitative evaluation: PSNR and uniform-window SSIM.
//!
//! PSNR(x̂, x) = 10 log10(max(x)^2 / MSE(x̂, x)), in dB.
//!
//! SSIM uses an unweighted sliding window over valid positions only (no
//! padding), with unbiased (n-1) variance and covariance estimates, window
//! statistics accumulated through integral images. With the default 7x7
//! window, k1 = 0.01 and k2 = 0.03, results match the common uniform-window
//! reference implementations.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::{Error, Result};

pub const DEFAULT_WINDOW: usize = 7;
pub const DEFAULT_K1: f64 = 0.01;
pub const DEFAULT_K2: f64 = 0.03;

/// PSNR/SSIM bundle for one image pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Peak signal-to-noise ratio in dB; infinite for identical images and
    /// serialized as the string `"inf"` in that case.
    #[serde(with = "psnr_serde")]
    pub psnr_db: f64,
    pub ssim: f64,
    /// Dynamic range L used for both metrics (max of the reference).
    pub dynamic_range_l: f64,
    /// SSIM window side length.
    pub window: usize,
}

/// Peak signal-to-noise ratio in dB; `x` is the reference defining the
/// dynamic range. Identical images give `+inf`.
pub fn psnr(x_hat: &Image, x: &Image) -> Result<f64> {
    x.check_same_shape(x_hat)?;
    let max = x.pixels().iter().fold(0.0f64, |m, &p| m.max(p as f64));
    if max <= 0.0 {
        return Err(Error::ZeroReference);
    }
    let n = (x.height() * x.width()) as f64;
    let mse = x
        .pixels()
        .iter()
        .zip(x_hat.pixels().iter())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max * max / mse).log10())
}

/// Inclusive prefix-sum table with a zero border, so any rectangle sum is
/// four lookups.
pub(crate) fn integral(values: &Array2<f64>) -> Array2<f64> {
    let (h, w) = values.dim();
    let mut s = Array2::<f64>::zeros((h + 1, w + 1));
    for i in 0..h {
        let mut row = 0.0;
        for j in 0..w {
            row += values[[i, j]];
            s[[i + 1, j + 1]] = s[[i, j + 1]] + row;
        }
    }
    s
}

fn window_sum(s: &Array2<f64>, i: usize, j: usize, win: usize) -> f64 {
    s[[i + win, j + win]] - s[[i, j + win]] - s[[i + win, j]] + s[[i, j]]
}

/// Mean SSIM over all valid window positions.
pub fn ssim(x_hat: &Image, x: &Image, window: usize, k1: f64, k2: f64, l: f64) -> Result<f64> {
    x.check_same_shape(x_hat)?;
    if window % 2 == 0 || window < 3 {
        return Err(Error::InvalidParameter {
            name: "window",
            reason: format!("must be odd and at least 3, got {window}"),
        });
    }
    let (h, w) = x.pixels().dim();
    if h < window || w < window {
        return Err(Error::InvalidParameter {
            name: "window",
            reason: format!("image {h}x{w} is smaller than the {window}x{window} window"),
        });
    }

    let a = x_hat.to_f64();
    let b = x.to_f64();
    let sa = integral(&a);
    let sb = integral(&b);
    let saa = integral(&(&a * &a));
    let sbb = integral(&(&b * &b));
    let sab = integral(&(&a * &b));

    let n = (window * window) as f64;
    let c1 = (k1 * l).powi(2);
    let c2 = (k2 * l).powi(2);

    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=(h - window) {
        for j in 0..=(w - window) {
            let su = window_sum(&sa, i, j, window);
            let sv = window_sum(&sb, i, j, window);
            let mu_u = su / n;
            let mu_v = sv / n;
            // Unbiased estimates, divisor n-1.
            let var_u = (window_sum(&saa, i, j, window) - su * su / n) / (n - 1.0);
            let var_v = (window_sum(&sbb, i, j, window) - sv * sv / n) / (n - 1.0);
            let cov = (window_sum(&sab, i, j, window) - su * sv / n) / (n - 1.0);
            let num = (2.0 * mu_u * mu_v + c1) * (2.0 * cov + c2);
            let den = (mu_u * mu_u + mu_v * mu_v + c1) * (var_u + var_v + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// PSNR and SSIM with the default constants: 7x7 window, k1 = 0.01,
/// k2 = 0.03, L = max of the reference.
pub fn evaluate(x_hat: &Image, x_ref: &Image) -> Result<MetricReport> {
    let psnr_db = psnr(x_hat, x_ref)?;
    let l = x_ref.pixels().iter().fold(0.0f64, |m, &p| m.max(p as f64));
    let ssim_val = ssim(x_hat, x_ref, DEFAULT_WINDOW, DEFAULT_K1, DEFAULT_K2, l)?;
    Ok(MetricReport {
        psnr_db,
        ssim: ssim_val,
        dynamic_range_l: l,
        window: DEFAULT_WINDOW,
    })
}

/// Serializes infinite PSNR as the string `"inf"`; finite values stay
/// numeric.
pub mod psnr_serde {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &f64, ser: S) -> std::result::Result<S::Ok, S::Error> {
        if value.is_finite() {
            ser.serialize_f64(*value)
        } else {
            ser.serialize_str("inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(de)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(s) if s == "inf" => Ok(f64::INFINITY),
            Raw::Text(s) => Err(de::Error::custom(format!("invalid PSNR value {s:?}"))),
        }
    }
}

#[cfg(test)]
pub(crate) mod reference {
    //! Independently coded uniform-window SSIM: direct per-window loops with
    //! no shared code with the integral-image path. Test oracle only.

    use crate::image::Image;

    pub fn ssim_naive(x_hat: &Image, x: &Image, window: usize, k1: f64, k2: f64, l: f64) -> f64 {
        let (h, w) = x.pixels().dim();
        let n = (window * window) as f64;
        let c1 = (k1 * l).powi(2);
        let c2 = (k2 * l).powi(2);
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..=(h - window) {
            for j in 0..=(w - window) {
                let mut su = 0.0;
                let mut sv = 0.0;
                for di in 0..window {
                    for dj in 0..window {
                        su += x_hat.pixels()[[i + di, j + dj]] as f64;
                        sv += x.pixels()[[i + di, j + dj]] as f64;
                    }
                }
                let mu_u = su / n;
                let mu_v = sv / n;
                let mut var_u = 0.0;
                let mut var_v = 0.0;
                let mut cov = 0.0;
                for di in 0..window {
                    for dj in 0..window {
                        let du = x_hat.pixels()[[i + di, j + dj]] as f64 - mu_u;
                        let dv = x.pixels()[[i + di, j + dj]] as f64 - mu_v;
                        var_u += du * du;
                        var_v += dv * dv;
                        cov += du * dv;
                    }
                }
                var_u /= n - 1.0;
                var_v /= n - 1.0;
                cov /= n - 1.0;
                let num = (2.0 * mu_u * mu_v + c1) * (2.0 * cov + c2);
                let den = (mu_u * mu_u + mu_v * mu_v + c1) * (var_u + var_v + c2);
                total += num / den;
                count += 1;
            }
        }
        total / count as f64
    }
}
