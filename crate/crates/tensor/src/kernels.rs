//! Raw numeric kernels shared by the tape ops.

use crate::element::{matmul, Element};
use crate::error::{config, Result};

pub const KERNEL: usize = 3;

/// Geometry of a 3x3 "same"-padded convolution over NHWC data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub stride: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    /// Output spatial size is `ceil(in / stride)`; the padding split follows
    /// the usual convention of putting the odd pixel at the bottom/right.
    pub fn same(batch: usize, in_h: usize, in_w: usize, in_c: usize, out_c: usize, stride: usize) -> Result<Self> {
        if stride != 1 && stride != 2 {
            return config(format!("stride must be 1 or 2, got {stride}"));
        }
        let out_h = in_h.div_ceil(stride);
        let out_w = in_w.div_ceil(stride);
        let pad_h = ((out_h - 1) * stride + KERNEL).saturating_sub(in_h);
        let pad_w = ((out_w - 1) * stride + KERNEL).saturating_sub(in_w);
        Ok(ConvGeom {
            batch,
            in_h,
            in_w,
            in_c,
            out_h,
            out_w,
            out_c,
            stride,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        })
    }

    pub fn patch_len(&self) -> usize {
        KERNEL * KERNEL * self.in_c
    }

    pub fn out_pixels(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.in_h * self.in_w * self.in_c
    }

    pub fn output_len(&self) -> usize {
        self.out_pixels() * self.out_c
    }

    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad_top as isize;
        let x = (ox * self.stride + kx) as isize - self.pad_left as isize;
        if y < 0 || x < 0 || y >= self.in_h as isize || x >= self.in_w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

/// Unfold NHWC input into `(out_pixels, 9 * in_c)` patches, ordered `[ky][kx][c]`.
pub fn im2col<T: Element>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch_len();
    let mut col = vec![T::zero(); g.out_pixels() * patch];
    let mut row = 0;
    for n in 0..g.batch {
        let img = &input[n * g.in_h * g.in_w * g.in_c..(n + 1) * g.in_h * g.in_w * g.in_c];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut col[row * patch..(row + 1) * patch];
                for ky in 0..KERNEL {
                    for kx in 0..KERNEL {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            let off = (ky * KERNEL + kx) * g.in_c;
                            let src = (y * g.in_w + x) * g.in_c;
                            dst[off..off + g.in_c].copy_from_slice(&img[src..src + g.in_c]);
                        }
                    }
                }
                row += 1;
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add patches back into an NHWC buffer.
pub fn col2im<T: Element>(col: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch_len();
    let mut out = vec![T::zero(); g.input_len()];
    let mut row = 0;
    for n in 0..g.batch {
        let img_len = g.in_h * g.in_w * g.in_c;
        let img = &mut out[n * img_len..(n + 1) * img_len];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src = &col[row * patch..(row + 1) * patch];
                for ky in 0..KERNEL {
                    for kx in 0..KERNEL {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            let off = (ky * KERNEL + kx) * g.in_c;
                            let dst = (y * g.in_w + x) * g.in_c;
                            for c in 0..g.in_c {
                                img[dst + c] = img[dst + c] + src[off + c];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
    out
}

fn add_bias<T: Element>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o = *o + b;
        }
    }
}

/// Column sums of a `(rows, width)` matrix, accumulated in `f64`.
pub fn column_sums<T: Element>(m: &[T], width: usize) -> Vec<T> {
    let mut acc = vec![0.0f64; width];
    for row in m.chunks_exact(width) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v.as_f64();
        }
    }
    acc.into_iter().map(T::from_f64).collect()
}

pub fn conv2d_forward<T: Element>(x: &[T], kernel: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let col = im2col(x, g);
    let mut out = vec![T::zero(); g.output_len()];
    matmul(&col, g.out_pixels(), g.patch_len(), false, kernel, g.patch_len(), g.out_c, false, &mut out, false);
    add_bias(&mut out, bias);
    out
}

/// Returns `(d_input, d_kernel, d_bias)`; `d_input` only when requested.
pub fn conv2d_backward<T: Element>(
    x: &[T],
    kernel: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let col = im2col(x, g);
    let mut dk = vec![T::zero(); g.patch_len() * g.out_c];
    matmul(&col, g.out_pixels(), g.patch_len(), true, grad_out, g.out_pixels(), g.out_c, false, &mut dk, false);
    let db = column_sums(grad_out, g.out_c);
    let dx = need_input.then(|| {
        let mut dcol = vec![T::zero(); g.out_pixels() * g.patch_len()];
        matmul(grad_out, g.out_pixels(), g.out_c, false, kernel, g.patch_len(), g.out_c, true, &mut dcol, false);
        col2im(&dcol, g)
    });
    (dx, dk, db)
}

/// Transposed convolution expressed through the conv geometry `g` it is the
/// adjoint of: input has `g`'s output shape, result has `g`'s input shape.
pub fn conv_transpose2d_forward<T: Element>(y: &[T], kernel: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let mut dcol = vec![T::zero(); g.out_pixels() * g.patch_len()];
    matmul(y, g.out_pixels(), g.out_c, false, kernel, g.patch_len(), g.out_c, true, &mut dcol, false);
    let mut out = col2im(&dcol, g);
    add_bias(&mut out, bias);
    out
}

pub fn conv_transpose2d_backward<T: Element>(
    y: &[T],
    kernel: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let col = im2col(grad_out, g);
    let mut dk = vec![T::zero(); g.patch_len() * g.out_c];
    matmul(&col, g.out_pixels(), g.patch_len(), true, y, g.out_pixels(), g.out_c, false, &mut dk, false);
    let db = column_sums(grad_out, g.in_c);
    let dy = need_input.then(|| {
        let mut dy = vec![T::zero(); g.out_pixels() * g.out_c];
        matmul(&col, g.out_pixels(), g.patch_len(), false, kernel, g.patch_len(), g.out_c, false, &mut dy, false);
        dy
    });
    (dy, dk, db)
}

/// Per-channel mean and biased variance over all leading axes.
pub fn channel_moments<T: Element>(x: &[T], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = (x.len() / channels) as f64;
    let mut mean = vec![0.0f64; channels];
    for row in x.chunks_exact(channels) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows);
    let mut var = vec![0.0f64; channels];
    for row in x.chunks_exact(channels) {
        for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v.as_f64() - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= rows);
    (mean, var)
}
