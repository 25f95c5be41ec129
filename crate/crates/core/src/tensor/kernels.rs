//! Raw loops behind the tape ops. Slices are row-major; shapes are checked by
//! the caller.

use super::{Scalar, TensorError};
use crate::parallel::for_each_chunk;

/// `c[m×n] = a[m×k] · b[k×n]`
pub(crate) fn mm_nn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for_each_chunk(&mut c, n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(br) {
                *cv = *cv + av * bv;
            }
        }
    });
    c
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`
pub(crate) fn mm_nt<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for_each_chunk(&mut c, n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, cv) in row.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            *cv = dot(ar, br);
        }
    });
    c
}

/// `c[k×n] = a[m×k]ᵀ · b[m×n]`
pub(crate) fn mm_tn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); k * n];
    for_each_chunk(&mut c, n, |p, row| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let br = &b[i * n..(i + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(br) {
                *cv = *cv + av * bv;
            }
        }
    });
    c
}

pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |s, (&x, &y)| s + x * y)
}

/// Supported convolution geometry: 1×1 with padding 0, or 3×3 with padding 1,
/// both stride 1. Output spatial extent always equals the input's.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dConfig {
    pub padding: usize,
    pub stride: usize,
}

impl Conv2dConfig {
    pub const SAME: Self = Self {
        padding: 1,
        stride: 1,
    };
    pub const POINTWISE: Self = Self {
        padding: 0,
        stride: 1,
    };

    pub(crate) fn validate(&self, kh: usize, kw: usize) -> Result<(), TensorError> {
        let ok = self.stride == 1
            && ((kh == 1 && kw == 1 && self.padding == 0) || (kh == 3 && kw == 3 && self.padding == 1));
        if ok {
            Ok(())
        } else {
            Err(TensorError::Config {
                kh,
                kw,
                padding: self.padding,
                stride: self.stride,
            })
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub ci: usize,
    pub co: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvDims {
    fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Output row range `[lo, hi)` for which `o + off - pad` stays inside `[0, extent)`.
    fn span(&self, off: usize, extent: usize) -> (usize, usize, isize) {
        let d = off as isize - self.pad as isize;
        let lo = (-d).max(0) as usize;
        let hi = (extent as isize - d).min(extent as isize).max(0) as usize;
        (lo, hi, d)
    }
}

/// Unfolds one image `[ci, h, w]` into `col[ci·k·k, h·w]`, zero where the
/// window leaves the image.
fn im2col<F: Scalar>(x: &[F], d: &ConvDims, col: &mut [F]) {
    let plane = d.plane();
    col.fill(F::zero());
    for ci in 0..d.ci {
        let inp = &x[ci * plane..][..plane];
        for ky in 0..d.k {
            let (y0, y1, dy) = d.span(ky, d.h);
            for kx in 0..d.k {
                let (x0, x1, dx) = d.span(kx, d.w);
                let (i0, i1) = ((x0 as isize + dx) as usize, (x1 as isize + dx) as usize);
                let row = &mut col[((ci * d.k + ky) * d.k + kx) * plane..][..plane];
                for oy in y0..y1 {
                    let iy = (oy as isize + dy) as usize;
                    row[oy * d.w + x0..oy * d.w + x1].copy_from_slice(&inp[iy * d.w + i0..iy * d.w + i1]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back onto `x[ci, h, w]` (accumulating).
fn col2im<F: Scalar>(col: &[F], d: &ConvDims, x: &mut [F]) {
    let plane = d.plane();
    for ci in 0..d.ci {
        let out = &mut x[ci * plane..][..plane];
        for ky in 0..d.k {
            let (y0, y1, dy) = d.span(ky, d.h);
            for kx in 0..d.k {
                let (x0, x1, dx) = d.span(kx, d.w);
                let (i0, i1) = ((x0 as isize + dx) as usize, (x1 as isize + dx) as usize);
                let row = &col[((ci * d.k + ky) * d.k + kx) * plane..][..plane];
                for oy in y0..y1 {
                    let iy = (oy as isize + dy) as usize;
                    let dst = &mut out[iy * d.w + i0..iy * d.w + i1];
                    for (o, &v) in dst.iter_mut().zip(&row[oy * d.w + x0..oy * d.w + x1]) {
                        *o = *o + v;
                    }
                }
            }
        }
    }
}

/// Dot product over eight fixed accumulator lanes.
fn dot8<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut lanes = [F::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            lanes[j] = lanes[j] + x[j] * y[j];
        }
    }
    for (j, (&x, &y)) in ra.iter().zip(rb).enumerate() {
        lanes[j] = lanes[j] + x * y;
    }
    lanes.iter().fold(F::zero(), |s, &v| s + v)
}

/// Images per partial sum in the kernel gradient, independent of the worker count.
const KERNEL_GRAD_BLOCK: usize = 8;

/// Zero-padded cross-correlation, `x[n,ci,h,w] ⋆ k[co,ci,kh,kw] → y[n,co,h,w]`.
pub(crate) fn conv2d_forward<F: Scalar>(x: &[F], k: &[F], d: ConvDims) -> Vec<F> {
    let plane = d.plane();
    let rows = d.ci * d.k * d.k;
    let mut y = vec![F::zero(); d.n * d.co * plane];
    for_each_chunk(&mut y, d.co * plane, |n, out| {
        let mut col = vec![F::zero(); rows * plane];
        im2col(&x[n * d.ci * plane..][..d.ci * plane], &d, &mut col);
        for (co, orow) in out.chunks_exact_mut(plane).enumerate() {
            for r in 0..rows {
                let wv = k[co * rows + r];
                if wv == F::zero() {
                    continue;
                }
                for (o, &c) in orow.iter_mut().zip(&col[r * plane..(r + 1) * plane]) {
                    *o = *o + wv * c;
                }
            }
        }
    });
    y
}

pub(crate) fn conv2d_grad_input<F: Scalar>(g: &[F], k: &[F], d: ConvDims) -> Vec<F> {
    let plane = d.plane();
    let rows = d.ci * d.k * d.k;
    let mut gx = vec![F::zero(); d.n * d.ci * plane];
    for_each_chunk(&mut gx, d.ci * plane, |n, out| {
        let gn = &g[n * d.co * plane..][..d.co * plane];
        let mut gcol = vec![F::zero(); rows * plane];
        for (r, crow) in gcol.chunks_exact_mut(plane).enumerate() {
            for co in 0..d.co {
                let wv = k[co * rows + r];
                if wv == F::zero() {
                    continue;
                }
                for (c, &gv) in crow.iter_mut().zip(&gn[co * plane..(co + 1) * plane]) {
                    *c = *c + wv * gv;
                }
            }
        }
        col2im(&gcol, &d, out);
    });
    gx
}

pub(crate) fn conv2d_grad_kernel<F: Scalar>(g: &[F], x: &[F], d: ConvDims) -> Vec<F> {
    let plane = d.plane();
    let rows = d.ci * d.k * d.k;
    let blocks = d.n.div_ceil(KERNEL_GRAD_BLOCK);
    let mut partial = vec![F::zero(); blocks * d.co * rows];
    for_each_chunk(&mut partial, d.co * rows, |b, out| {
        let mut col = vec![F::zero(); rows * plane];
        for n in b * KERNEL_GRAD_BLOCK..((b + 1) * KERNEL_GRAD_BLOCK).min(d.n) {
            im2col(&x[n * d.ci * plane..][..d.ci * plane], &d, &mut col);
            let gn = &g[n * d.co * plane..][..d.co * plane];
            for co in 0..d.co {
                let gp = &gn[co * plane..(co + 1) * plane];
                for r in 0..rows {
                    let o = &mut out[co * rows + r];
                    *o = *o + dot8(gp, &col[r * plane..(r + 1) * plane]);
                }
            }
        }
    });
    let mut gk = vec![F::zero(); d.co * rows];
    for p in partial.chunks_exact(d.co * rows) {
        for (a, &v) in gk.iter_mut().zip(p) {
            *a = *a + v;
        }
    }
    gk
}

/// 2×2 mean pooling over planes of `h×w` (both even).
pub(crate) fn avg_pool2_forward<F: Scalar>(x: &[F], planes: usize, h: usize, w: usize) -> Vec<F> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = F::lit(0.25);
    let mut y = vec![F::zero(); planes * oh * ow];
    for_each_chunk(&mut y, oh * ow, |p, out| {
        let inp = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (iy, ix) = (2 * oy, 2 * ox);
                let s = inp[iy * w + ix] + inp[iy * w + ix + 1] + inp[(iy + 1) * w + ix] + inp[(iy + 1) * w + ix + 1];
                out[oy * ow + ox] = s * quarter;
            }
        }
    });
    y
}

pub(crate) fn avg_pool2_backward<F: Scalar>(g: &[F], planes: usize, h: usize, w: usize) -> Vec<F> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = F::lit(0.25);
    let mut gx = vec![F::zero(); planes * h * w];
    for_each_chunk(&mut gx, h * w, |p, out| {
        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
        for iy in 0..h {
            for ix in 0..w {
                out[iy * w + ix] = gp[(iy / 2) * ow + ix / 2] * quarter;
            }
        }
    });
    gx
}
