//! Convolution kernels built on patch matrices and a single GEMM per call.
//!
//! Patch matrices are stored "row per output position": for a batch of `n`
//! images the matrix has `n * out_h * out_w` rows and `channels * kh * kw`
//! columns, so each image owns a contiguous block of rows.

use crate::exec;
use crate::scalar::Scalar;

/// Geometry of a 2-D convolution over one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Returns `None` when the kernel does not fit the padded input.
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || kernel == 0 || height + 2 * pad < kernel || width + 2 * pad < kernel {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < limit).then_some(i as usize)
    }
}

/// Fills `rows` (positions × patch_len) with the patches of one image.
pub fn im2col<T: Scalar>(g: &ConvGeom, image: &[T], rows: &mut [T]) {
    let kk = g.kernel * g.kernel;
    let plen = g.patch_len();
    for oh in 0..g.out_h {
        for ow in 0..g.out_w {
            let row = &mut rows[(oh * g.out_w + ow) * plen..][..plen];
            for ki in 0..g.kernel {
                let ih = g.source(oh, ki, g.height);
                for kj in 0..g.kernel {
                    let iw = g.source(ow, kj, g.width);
                    for c in 0..g.channels {
                        row[c * kk + ki * g.kernel + kj] = match (ih, iw) {
                            (Some(h), Some(w)) => image[(c * g.height + h) * g.width + w],
                            _ => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds patch rows of one image back into `image` (adjoint of [`im2col`]).
pub fn col2im<T: Scalar>(g: &ConvGeom, rows: &[T], image: &mut [T]) {
    let kk = g.kernel * g.kernel;
    let plen = g.patch_len();
    for oh in 0..g.out_h {
        for ow in 0..g.out_w {
            let row = &rows[(oh * g.out_w + ow) * plen..][..plen];
            for ki in 0..g.kernel {
                let Some(h) = g.source(oh, ki, g.height) else { continue };
                for kj in 0..g.kernel {
                    let Some(w) = g.source(ow, kj, g.width) else { continue };
                    for c in 0..g.channels {
                        let dst = &mut image[(c * g.height + h) * g.width + w];
                        *dst = *dst + row[c * kk + ki * g.kernel + kj];
                    }
                }
            }
        }
    }
}

/// Batched patch matrix for `batch` images laid out back to back.
pub fn im2col_batch<T: Scalar>(g: &ConvGeom, batch: usize, images: &[T]) -> Vec<T> {
    let block = g.positions() * g.patch_len();
    let mut rows = vec![T::zero(); batch * block];
    let ilen = g.image_len();
    exec::for_each_chunk_mut(&mut rows, block, |n, r| im2col(g, &images[n * ilen..(n + 1) * ilen], r));
    rows
}

pub fn col2im_batch<T: Scalar>(g: &ConvGeom, batch: usize, rows: &[T]) -> Vec<T> {
    let block = g.positions() * g.patch_len();
    let ilen = g.image_len();
    let mut images = vec![T::zero(); batch * ilen];
    exec::for_each_chunk_mut(&mut images, ilen, |n, img| col2im(g, &rows[n * block..(n + 1) * block], img));
    images
}

/// Per-image transpose of `[batch, a, b]` into `[batch, b, a]`.
pub fn transpose_batch<T: Scalar>(src: &[T], batch: usize, a: usize, b: usize) -> Vec<T> {
    let mut out = vec![T::zero(); batch * a * b];
    if a * b == 0 {
        return out;
    }
    exec::for_each_chunk_mut(&mut out, a * b, |n, dst| {
        let s = &src[n * a * b..(n + 1) * a * b];
        for i in 0..a {
            for j in 0..b {
                dst[j * a + i] = s[i * b + j];
            }
        }
    });
    out
}

/// Row-major `c[m, n] = a[m, k] @ b[k, n]` with optional transposes of the inputs
/// (`a` stored as `[k, m]` when `ta`, `b` stored as `[n, k]` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn matmul_into<T: Scalar>(
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    beta: T,
    c: &mut [T],
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    T::gemm(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

pub fn matmul<T: Scalar>(a: &[T], ta: bool, b: &[T], tb: bool, m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    matmul_into(a, ta, b, tb, m, k, n, T::zero(), &mut c);
    c
}
