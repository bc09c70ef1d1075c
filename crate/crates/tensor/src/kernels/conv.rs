//! 2-D convolution as one im2col GEMM over the whole batch.

use crate::scalar::{gemm, MatView, Real};

/// Geometry of a square-kernel convolution with `pad = kernel / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    /// Rows of the im2col matrix.
    pub fn patch_len(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Columns of the im2col matrix.
    fn width(&self) -> usize {
        self.n * self.out_plane()
    }
}

/// Column buffer `[patch_len][n * out_plane]`: column `img * out_plane + p`
/// holds the receptive field of output pixel `p` of image `img`.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow, k, pad) = (g.out_h(), g.out_w(), g.kernel, g.pad() as isize);
    let plane = oh * ow;
    let width = g.width();
    let mut cols = vec![T::zero(); g.patch_len() * width];
    for ci in 0..g.cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for n in 0..g.n {
                    let src = &x[(n * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut cols[row * width + n * plane..][..plane];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - pad;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..][..g.w];
                        let (lo, hi) = valid_cols(g, kx, ow);
                        let drow = &mut dst[oy * ow..][..ow];
                        if g.stride == 1 {
                            let off = lo + kx - pad as usize;
                            drow[lo..hi].copy_from_slice(&srow[off..off + hi - lo]);
                        } else {
                            for ox in lo..hi {
                                drow[ox] = srow[ox * g.stride + kx - pad as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` is in bounds.
fn valid_cols(g: &ConvGeom, kx: usize, ow: usize) -> (usize, usize) {
    let pad = g.pad();
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(g.stride) };
    // need ox * stride + kx - pad <= w - 1
    let span = (g.w + pad) as isize - 1 - kx as isize;
    if span < 0 {
        return (0, 0);
    }
    let hi = (span as usize / g.stride + 1).min(ow);
    (lo.min(hi), hi)
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow, k, pad) = (g.out_h(), g.out_w(), g.kernel, g.pad() as isize);
    let plane = oh * ow;
    let width = g.width();
    for ci in 0..g.cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for n in 0..g.n {
                    let dst = &mut dx[(n * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    let src = &cols[row * width + n * plane..][..plane];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - pad;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let (lo, hi) = valid_cols(g, kx, ow);
                        let drow = &mut dst[iy as usize * g.w..][..g.w];
                        let srow = &src[oy * ow..][..ow];
                        if g.stride == 1 {
                            let off = lo + kx - pad as usize;
                            for (d, &v) in drow[off..off + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                                *d += v;
                            }
                        } else {
                            for ox in lo..hi {
                                drow[ox * g.stride + kx - pad as usize] += srow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[n, c, plane]` to `[c, n * plane]` and back.
fn to_channel_major<T: Real>(x: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for img in 0..n {
        for ch in 0..c {
            out[ch * n * plane + img * plane..][..plane].copy_from_slice(&x[(img * c + ch) * plane..][..plane]);
        }
    }
    out
}

fn from_channel_major<T: Real>(x: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for img in 0..n {
        for ch in 0..c {
            out[(img * c + ch) * plane..][..plane].copy_from_slice(&x[ch * n * plane + img * plane..][..plane]);
        }
    }
    out
}

/// Forward pass. Returns the output `[n, cout, oh, ow]` and the im2col
/// buffer needed for the backward pass.
pub fn conv2d_forward<T: Real>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> (Vec<T>, Option<Vec<T>>) {
    let plane = g.out_plane();
    let (kk, width) = (g.patch_len(), g.width());
    let cols = im2col(x, g);
    let mut y = vec![T::zero(); g.cout * width];
    gemm(
        T::one(),
        weight,
        MatView::row_major(0, g.cout, kk),
        &cols,
        MatView::row_major(0, kk, width),
        T::zero(),
        &mut y,
        MatView::row_major(0, g.cout, width),
    );
    if let Some(b) = bias {
        for (co, row) in y.chunks_mut(width).enumerate() {
            let bv = b[co];
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
    (from_channel_major(&y, g.n, g.cout, plane), Some(cols))
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dweight: Option<Vec<T>>,
    pub dbias: Option<Vec<T>>,
}

/// Backward pass. `cols` is the buffer returned by the forward pass; when
/// absent it is rebuilt from `x`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    dy: &[T],
    x: &[T],
    cols: Option<&[T]>,
    weight: &[T],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> ConvGrads<T> {
    let plane = g.out_plane();
    let (kk, width) = (g.patch_len(), g.width());
    let dyc = to_channel_major(dy, g.n, g.cout, plane);
    let dweight = want_dw.then(|| {
        let rebuilt;
        let src = match cols {
            Some(c) => c,
            None => {
                rebuilt = im2col(x, g);
                &rebuilt
            }
        };
        let mut dw = vec![T::zero(); g.cout * kk];
        gemm(
            T::one(),
            &dyc,
            MatView::row_major(0, g.cout, width),
            src,
            MatView::row_major(0, kk, width).t(),
            T::zero(),
            &mut dw,
            MatView::row_major(0, g.cout, kk),
        );
        dw
    });
    let dbias = want_db.then(|| dyc.chunks(width).map(|row| row.iter().copied().sum::<T>()).collect());
    let dx = want_dx.then(|| {
        let mut dcols = vec![T::zero(); kk * width];
        gemm(
            T::one(),
            weight,
            MatView::row_major(0, g.cout, kk).t(),
            &dyc,
            MatView::row_major(0, g.cout, width),
            T::zero(),
            &mut dcols,
            MatView::row_major(0, kk, width),
        );
        let mut dx = vec![T::zero(); g.n * g.cin * g.h * g.w];
        col2im(&dcols, g, &mut dx);
        dx
    });
    ConvGrads { dx, dweight, dbias }
}
