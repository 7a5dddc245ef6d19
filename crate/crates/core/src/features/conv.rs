//! Dense kernels for the convolutional trunk: im2col + GEMM convolution,
//! its input-gradient (a convolution with flipped kernels), and 2x2 max
//! pooling with argmax masks for the backward pass.
//!
//! All convolutions are 3x3, stride 1, zero-padded by 1, so spatial size is
//! preserved and the input gradient has the same im2col structure as the
//! forward pass.

use faer::linalg::matmul::matmul as matmul_faer;
use faer::{Accum, MatMut, MatRef, Par};

/// Contiguous `[channels][height][width]` tensor.
#[derive(Debug, Clone)]
pub(crate) struct Tensor3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor3 {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.h * self.w;
        &self.data[c * hw..(c + 1) * hw]
    }
}

thread_local! {
    /// Per-thread buffer for the unfolded matrices. It only ever grows, and
    /// both users (im2col and the backward GEMM) fully overwrite the prefix
    /// they use, so no zeroing is needed between calls.
    static COLS: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

fn with_cols<R>(n: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    COLS.with(|cell| {
        let mut buf = cell.borrow_mut();
        if buf.len() < n {
            buf.resize(n, 0.0);
        }
        f(&mut buf[..n])
    })
}

/// dst[m,n] = a[m,k] * b[k,n], all row-major.
fn gemm(dst: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(dst.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    matmul_faer(
        MatMut::from_row_major_slice_mut(dst, m, n),
        Accum::Replace,
        MatRef::from_row_major_slice(a, m, k),
        MatRef::from_row_major_slice(b, k, n),
        1.0,
        Par::Seq,
    );
}

/// Unfolds `src` into `cols[(c*9 + ky*3 + kx), y*w + x] = src[c, y+ky-1, x+kx-1]`
/// with zeros outside the frame. Writes every element of `cols`.
fn im2col3x3(src: &Tensor3, cols: &mut [f64]) {
    let (h, w) = (src.h, src.w);
    let hw = h * w;
    debug_assert_eq!(cols.len(), src.c * 9 * hw);
    for c in 0..src.c {
        let plane = src.channel(c);
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = &mut cols[(c * 9 + ky * 3 + kx) * hw..][..hw];
                // Shift by (ky-1, kx-1); copy the valid span of each line.
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx.max(0)) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst_line = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst_line.fill(0.0);
                        continue;
                    }
                    let src_line = &plane[sy as usize * w..(sy as usize + 1) * w];
                    dst_line[..x_lo].fill(0.0);
                    dst_line[x_hi..].fill(0.0);
                    let shift = (x_lo as isize + dx) as usize;
                    dst_line[x_lo..x_hi].copy_from_slice(&src_line[shift..shift + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col3x3`]: accumulates each unfolded row back into the
/// shifted plane positions it was read from.
fn col2im3x3(cols: &[f64], out: &mut Tensor3) {
    let (h, w) = (out.h, out.w);
    let hw = h * w;
    for c in 0..out.c {
        let plane = &mut out.data[c * hw..(c + 1) * hw];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = &cols[(c * 9 + ky * 3 + kx) * hw..][..hw];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx.max(0)) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_line = &row[y * w + x_lo..y * w + x_hi];
                    let base = sy as usize * w + (x_lo as isize + dx) as usize;
                    let dst_line = &mut plane[base..base + (x_hi - x_lo)];
                    for (d, s) in dst_line.iter_mut().zip(src_line) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// y = relu(W (*) src + bias). `weight` is `[out_ch, in_ch*9]` row-major with
/// the same (c, ky, kx) ordering as the im2col matrix.
pub(crate) fn conv3x3_bias_relu(
    weight: &[f64],
    bias: &[f64],
    out_ch: usize,
    src: &Tensor3,
) -> Tensor3 {
    let hw = src.h * src.w;
    let mut out = Tensor3::zeros(out_ch, src.h, src.w);
    with_cols(src.c * 9 * hw, |cols| {
        im2col3x3(src, cols);
        gemm(&mut out.data, weight, cols, out_ch, src.c * 9, hw);
    });
    for o in 0..out_ch {
        let b = bias[o];
        for v in &mut out.data[o * hw..(o + 1) * hw] {
            *v = (*v + b).max(0.0);
        }
    }
    out
}

/// Input gradient of the convolution: the unfold adjoint of the forward
/// pass, `d_cols = W^T d_out` followed by col2im accumulation. `weight_t`
/// is the `[in_ch*9, out_ch]` transpose of the packed forward weights.
pub(crate) fn conv3x3_backward_input(weight_t: &[f64], in_ch: usize, d_out: &Tensor3) -> Tensor3 {
    let hw = d_out.h * d_out.w;
    let mut out = Tensor3::zeros(in_ch, d_out.h, d_out.w);
    with_cols(in_ch * 9 * hw, |cols| {
        gemm(cols, weight_t, &d_out.data, in_ch * 9, d_out.c, hw);
        col2im3x3(cols, &mut out);
    });
    out
}

/// c = a * b for row-major ndarray matrices, through the same GEMM backend
/// as the convolutions.
pub(crate) fn matmul(a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>) -> ndarray::Array2<f64> {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    debug_assert_eq!(k, k2);
    let mut out = ndarray::Array2::<f64>::zeros((m, n));
    gemm(
        out.as_slice_mut().expect("freshly allocated"),
        a.as_slice().expect("standard layout"),
        b.as_slice().expect("standard layout"),
        m,
        k,
        n,
    );
    out
}

/// G = f * f^T without materializing the transpose.
pub(crate) fn matmul_self_t(f: &ndarray::Array2<f64>) -> ndarray::Array2<f64> {
    let (n, m) = f.dim();
    let mut out = ndarray::Array2::<f64>::zeros((n, n));
    let fr = MatRef::from_row_major_slice(f.as_slice().expect("standard layout"), n, m);
    matmul_faer(
        MatMut::from_row_major_slice_mut(out.as_slice_mut().expect("freshly allocated"), n, n),
        Accum::Replace,
        fr,
        fr.transpose(),
        1.0,
        Par::Seq,
    );
    out
}

/// 2x2 max pooling with stride 2, floor semantics for odd sizes. The mask
/// records the argmax corner of every window, ties resolved to the first of
/// (0,0), (0,1), (1,0), (1,1) in scan order.
pub(crate) fn maxpool2(src: &Tensor3) -> (Tensor3, Vec<u8>) {
    let oh = src.h / 2;
    let ow = src.w / 2;
    let mut out = Tensor3::zeros(src.c, oh, ow);
    let mut mask = vec![0u8; src.c * oh * ow];
    for c in 0..src.c {
        let plane = src.channel(c);
        let out_plane = &mut out.data[c * oh * ow..(c + 1) * oh * ow];
        let mask_plane = &mut mask[c * oh * ow..(c + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0u8;
                for dy in 0..2usize {
                    for dx in 0..2usize {
                        let v = plane[(2 * y + dy) * src.w + 2 * x + dx];
                        if v > best {
                            best = v;
                            arg = (dy as u8) << 1 | dx as u8;
                        }
                    }
                }
                out_plane[y * ow + x] = best;
                mask_plane[y * ow + x] = arg;
            }
        }
    }
    (out, mask)
}

/// Routes each pooled gradient back to its argmax position; cropped rows or
/// columns (odd input sizes) receive zero.
pub(crate) fn maxpool2_backward(
    d_out: &Tensor3,
    mask: &[u8],
    in_h: usize,
    in_w: usize,
) -> Tensor3 {
    let (oh, ow) = (d_out.h, d_out.w);
    let mut d_in = Tensor3::zeros(d_out.c, in_h, in_w);
    for c in 0..d_out.c {
        let grad_plane = d_out.channel(c);
        let mask_plane = &mask[c * oh * ow..(c + 1) * oh * ow];
        let in_plane = &mut d_in.data[c * in_h * in_w..(c + 1) * in_h * in_w];
        for y in 0..oh {
            for x in 0..ow {
                let arg = mask_plane[y * ow + x];
                let dy = (arg >> 1) as usize;
                let dx = (arg & 1) as usize;
                in_plane[(2 * y + dy) * in_w + 2 * x + dx] += grad_plane[y * ow + x];
            }
        }
    }
    d_in
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(c: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor3 {
        let mut t = Tensor3::zeros(c, h, w);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    t.data[ci * h * w + y * w + x] = f(ci, y, x);
                }
            }
        }
        t
    }

    /// Direct triple-loop convolution used as the oracle for the GEMM path.
    fn conv_naive(weight: &[f64], bias: &[f64], out_ch: usize, src: &Tensor3) -> Tensor3 {
        let mut out = Tensor3::zeros(out_ch, src.h, src.w);
        for o in 0..out_ch {
            for y in 0..src.h as isize {
                for x in 0..src.w as isize {
                    let mut acc = bias[o];
                    for c in 0..src.c {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let sy = y + ky - 1;
                                let sx = x + kx - 1;
                                if sy < 0 || sx < 0 || sy >= src.h as isize || sx >= src.w as isize
                                {
                                    continue;
                                }
                                let wv = weight
                                    [o * src.c * 9 + c * 9 + ky as usize * 3 + kx as usize];
                                acc += wv * src.channel(c)[sy as usize * src.w + sx as usize];
                            }
                        }
                    }
                    out.data[o * src.h * src.w + y as usize * src.w + x as usize] = acc.max(0.0);
                }
            }
        }
        out
    }

    #[test]
    fn gemm_conv_matches_naive() {
        let src = tensor(2, 6, 5, |c, y, x| {
            ((c * 31 + y * 7 + x * 3) % 17) as f64 * 0.1 - 0.5
        });
        let weight: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 37) % 11) as f64 * 0.1 - 0.4).collect();
        let bias = vec![0.05, -0.1, 0.2];
        let fast = conv3x3_bias_relu(&weight, &bias, 3, &src);
        let slow = conv_naive(&weight, &bias, 3, &src);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn maxpool_selects_maximum_and_routes_gradient() {
        let src = tensor(1, 4, 4, |_, y, x| (y * 4 + x) as f64);
        let (out, mask) = maxpool2(&src);
        assert_eq!(out.data, vec![5.0, 7.0, 13.0, 15.0]);
        assert!(mask.iter().all(|&m| m == 3)); // bottom-right corner wins
        let mut d_out = Tensor3::zeros(1, 2, 2);
        d_out.data.copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let d_in = maxpool2_backward(&d_out, &mask, 4, 4);
        assert_eq!(d_in.data[1 * 4 + 1], 1.0);
        assert_eq!(d_in.data[1 * 4 + 3], 2.0);
        assert_eq!(d_in.data[3 * 4 + 1], 3.0);
        assert_eq!(d_in.data[3 * 4 + 3], 4.0);
        assert_eq!(d_in.data.iter().sum::<f64>(), 10.0);
    }

    #[test]
    fn maxpool_tie_prefers_scan_order() {
        let src = tensor(1, 2, 2, |_, _, _| 1.0);
        let (_, mask) = maxpool2(&src);
        assert_eq!(mask, vec![0]);
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        // d<out, G>/d(src) for a fixed cogradient G, checked pixel by pixel.
        let src = tensor(2, 5, 4, |c, y, x| ((c + 2 * y + 3 * x) % 7) as f64 * 0.2 - 0.3);
        let weight: Vec<f64> = (0..2 * 2 * 9)
            .map(|i| ((i * 29) % 13) as f64 * 0.07 - 0.4)
            .collect();
        let bias = vec![0.02, -0.03];
        let cograd = tensor(2, 5, 4, |c, y, x| ((c + y + x) % 5) as f64 * 0.1 - 0.2);

        // Analytic: gate by relu mask, then the unfold-adjoint convolution.
        let fwd = conv3x3_bias_relu(&weight, &bias, 2, &src);
        let mut gated = cograd.clone();
        for (g, a) in gated.data.iter_mut().zip(&fwd.data) {
            if *a <= 0.0 {
                *g = 0.0;
            }
        }
        let mut weight_t = vec![0.0; 2 * 9 * 2];
        for o in 0..2 {
            for ck in 0..2 * 9 {
                weight_t[ck * 2 + o] = weight[o * 2 * 9 + ck];
            }
        }
        let analytic = conv3x3_backward_input(&weight_t, 2, &gated);

        let objective = |t: &Tensor3| -> f64 {
            let out = conv_naive(&weight, &bias, 2, t);
            out.data.iter().zip(&cograd.data).map(|(a, g)| a * g).sum()
        };
        let h = 1e-6;
        for probe in [(0usize, 0usize, 0usize), (1, 2, 3), (0, 4, 1), (1, 1, 2)] {
            let idx = probe.0 * 5 * 4 + probe.1 * 4 + probe.2;
            let mut plus = src.clone();
            plus.data[idx] += h;
            let mut minus = src.clone();
            minus.data[idx] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let an = analytic.data[idx];
            assert!((fd - an).abs() < 1e-6, "pixel {probe:?}: fd {fd} vs {an}");
        }
    }
}
