//! Minimal deterministic line charts rendered straight into a grayscale
//! image: axes, light gridlines and one polyline. No text; the companion
//! CSV written next to each figure carries the numbers.

use ndarray::Array2;
use rnst_core::Image;

const WIDTH: usize = 640;
const HEIGHT: usize = 480;
const MARGIN: usize = 48;

pub struct Chart {
    canvas: Array2<f32>,
}

impl Default for Chart {
    fn default() -> Self {
        Chart {
            canvas: Array2::from_elem((HEIGHT, WIDTH), 1.0),
        }
    }
}

impl Chart {
    /// Renders `values` against their 1-based index.
    pub fn line(values: &[f64]) -> Image {
        let mut chart = Chart::default();
        chart.frame();
        if !values.is_empty() {
            let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
            let (lo, hi) = bounds(&finite);
            let n = values.len();
            let px = |i: usize| {
                MARGIN as f64
                    + (WIDTH - 2 * MARGIN) as f64
                        * if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 }
            };
            let py = |v: f64| {
                let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
                (HEIGHT - MARGIN) as f64 - (HEIGHT - 2 * MARGIN) as f64 * t
            };
            chart.gridlines(lo, hi, &py);
            let mut prev: Option<(f64, f64)> = None;
            for (i, &v) in values.iter().enumerate() {
                if !v.is_finite() {
                    prev = None;
                    continue;
                }
                let p = (px(i), py(v));
                if let Some(q) = prev {
                    chart.segment(q, p, 0.0);
                }
                chart.dot(p);
                prev = Some(p);
            }
        }
        Image::new(chart.canvas).expect("canvas exceeds minimum size")
    }

    fn frame(&mut self) {
        let (h, w) = (HEIGHT, WIDTH);
        self.segment(
            (MARGIN as f64, (h - MARGIN) as f64),
            ((w - MARGIN) as f64, (h - MARGIN) as f64),
            0.0,
        );
        self.segment(
            (MARGIN as f64, MARGIN as f64),
            (MARGIN as f64, (h - MARGIN) as f64),
            0.0,
        );
    }

    fn gridlines(&mut self, lo: f64, hi: f64, py: &dyn Fn(f64) -> f64) {
        if hi <= lo {
            return;
        }
        for k in 1..5 {
            let v = lo + (hi - lo) * k as f64 / 5.0;
            let y = py(v);
            self.segment((MARGIN as f64, y), ((WIDTH - MARGIN) as f64, y), 0.85);
        }
    }

    fn dot(&mut self, (x, y): (f64, f64)) {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                self.plot(x as i64 + dx, y as i64 + dy, 0.0);
            }
        }
    }

    fn segment(&mut self, (x0, y0): (f64, f64), (x1, y1): (f64, f64), shade: f32) {
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = x0 + (x1 - x0) * t;
            let y = y0 + (y1 - y0) * t;
            self.plot(x.round() as i64, y.round() as i64, shade);
        }
    }

    fn plot(&mut self, x: i64, y: i64, shade: f32) {
        if x >= 0 && y >= 0 && (x as usize) < WIDTH && (y as usize) < HEIGHT {
            let px = &mut self.canvas[[y as usize, x as usize]];
            *px = px.min(shade);
        }
    }
}

fn bounds(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo.is_finite() && hi.is_finite() {
        let pad = (hi - lo).abs().max(1e-12) * 0.05;
        (lo - pad, hi + pad)
    } else {
        (0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_deterministically() {
        let values = vec![3.0, 1.0, 2.5, 2.0];
        let a = Chart::line(&values);
        let b = Chart::line(&values);
        assert!(a.bit_eq(&b));
        assert_eq!((a.height(), a.width()), (HEIGHT, WIDTH));
    }

    #[test]
    fn handles_single_point_and_nan() {
        let a = Chart::line(&[1.0]);
        let b = Chart::line(&[f64::NAN, 1.0, f64::NAN]);
        assert_eq!(a.height(), b.height());
    }
}
