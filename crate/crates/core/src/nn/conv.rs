//! im2col-based 2-D convolution kernels shared by the forward and backward
//! passes of `Conv2D` and `ConvTranspose2D`.

use super::{NnError, Real};

/// Square-kernel convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Result<Self, NnError> {
        if kernel == 0 || stride == 0 {
            return Err(NnError::InvalidConfig(format!(
                "kernel {kernel} and stride {stride} must be >= 1"
            )));
        }
        Ok(Self {
            kernel,
            stride,
            padding,
        })
    }

    /// Output side of a convolution over an input of side `n`.
    pub fn conv_out(&self, n: usize) -> Option<usize> {
        let span = n + 2 * self.padding;
        (span >= self.kernel).then(|| (span - self.kernel) / self.stride + 1)
    }

    /// Output side of a transposed convolution over an input of side `n`.
    pub fn transpose_out(&self, n: usize, output_padding: usize) -> Option<usize> {
        let full = (n.checked_sub(1)?) * self.stride + self.kernel + output_padding;
        full.checked_sub(2 * self.padding).filter(|&v| v > 0)
    }
}

/// Unfolds `src` of layout `(batch, channels, sh, sw)` into a
/// `(channels·k·k) × (batch·gh·gw)` column matrix. Column `(b, y, x)` of
/// row `(c, ki, kj)` reads `src[b, c, y·s − p + ki, x·s − p + kj]`, zero
/// outside the source.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Real>(
    src: &[T],
    batch: usize,
    channels: usize,
    (sh, sw): (usize, usize),
    (gh, gw): (usize, usize),
    geom: ConvGeom,
) -> Vec<T> {
    let k = geom.kernel;
    let ncols = batch * gh * gw;
    let mut cols = vec![T::ZERO; channels * k * k * ncols];
    let pad = geom.padding as isize;
    let stride = geom.stride as isize;
    for c in 0..channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..batch {
                    let plane =
                        &src[(b * channels + c) * sh * sw..(b * channels + c + 1) * sh * sw];
                    for y in 0..gh {
                        let sy = y as isize * stride - pad + ki as isize;
                        if sy < 0 || sy >= sh as isize {
                            continue;
                        }
                        let src_row = &plane[sy as usize * sw..(sy as usize + 1) * sw];
                        let dst = &mut dst_row[(b * gh + y) * gw..(b * gh + y + 1) * gw];
                        for (x, d) in dst.iter_mut().enumerate() {
                            let sx = x as isize * stride - pad + kj as isize;
                            if sx >= 0 && sx < sw as isize {
                                *d = src_row[sx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates a column matrix back into `dst`.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Real>(
    cols: &[T],
    dst: &mut [T],
    batch: usize,
    channels: usize,
    (sh, sw): (usize, usize),
    (gh, gw): (usize, usize),
    geom: ConvGeom,
) {
    let k = geom.kernel;
    let ncols = batch * gh * gw;
    let pad = geom.padding as isize;
    let stride = geom.stride as isize;
    for c in 0..channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..batch {
                    let base = (b * channels + c) * sh * sw;
                    for y in 0..gh {
                        let sy = y as isize * stride - pad + ki as isize;
                        if sy < 0 || sy >= sh as isize {
                            continue;
                        }
                        let src = &src_row[(b * gh + y) * gw..(b * gh + y + 1) * gw];
                        let out_row =
                            &mut dst[base + sy as usize * sw..base + (sy as usize + 1) * sw];
                        for (x, &v) in src.iter().enumerate() {
                            let sx = x as isize * stride - pad + kj as isize;
                            if sx >= 0 && sx < sw as isize {
                                out_row[sx as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `(batch, channels, plane)` → `(channels, batch·plane)`.
pub fn batch_major_to_channel_major<T: Real>(
    src: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
) -> Vec<T> {
    let mut out = vec![T::ZERO; src.len()];
    for b in 0..batch {
        for c in 0..channels {
            let s = &src[(b * channels + c) * plane..(b * channels + c + 1) * plane];
            out[(c * batch + b) * plane..(c * batch + b + 1) * plane].copy_from_slice(s);
        }
    }
    out
}

/// `(channels, batch·plane)` → `(batch, channels, plane)`.
pub fn channel_major_to_batch_major<T: Real>(
    src: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
) -> Vec<T> {
    let mut out = vec![T::ZERO; src.len()];
    for c in 0..channels {
        for b in 0..batch {
            let s = &src[(c * batch + b) * plane..(c * batch + b + 1) * plane];
            out[(b * channels + c) * plane..(b * channels + c + 1) * plane].copy_from_slice(s);
        }
    }
    out
}

/// Row-major `m × n` matrix strides.
#[inline]
pub(crate) fn rm(n: usize) -> (isize, isize) {
    (n as isize, 1)
}

/// Strides reading a row-major `r × c` matrix as its `c × r` transpose.
#[inline]
pub(crate) fn tr(c: usize) -> (isize, isize) {
    (1, c as isize)
}
