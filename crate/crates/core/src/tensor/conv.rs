//! Convolution kernels shared by the tape ops.
//!
//! Both convolution flavours lower to GEMM over an unfolded ("im2col")
//! matrix. A transposed convolution is the data-gradient of an ordinary
//! convolution, so it reuses the same unfold/fold pair with the roles of
//! the two spatial grids swapped.

use rayon::prelude::*;

use super::Real;

/// Spatial geometry of an unfold: an `in_h × in_w` grid sampled by a
/// `k × k` window at `out_h × out_w` positions.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    #[inline]
    fn src_index(&self, o: usize, kk: usize, in_len: usize) -> Option<usize> {
        let i = (o * self.stride + kk) as isize - self.pad as isize;
        if i < 0 || i as usize >= in_len {
            None
        } else {
            Some(i as usize)
        }
    }
}

/// `cols[(c, ky, kx), (oy, ox)] = src[c, oy*s - p + ky, ox*s - p + kx]`, zero outside.
pub(crate) fn im2col<T: Real>(src: &[T], g: &Geometry, cols: &mut [T]) {
    let ncols = g.cols();
    debug_assert_eq!(cols.len(), g.rows() * ncols);
    for c in 0..g.channels {
        let plane = &src[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    match g.src_index(oy, ky, g.in_h) {
                        None => line.iter_mut().for_each(|v| *v = T::zero()),
                        Some(iy) => {
                            let srow = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.src_index(ox, kx, g.in_w) {
                                    Some(ix) => srow[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `dst`.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &Geometry, dst: &mut [T]) {
    let ncols = g.cols();
    for c in 0..g.channels {
        let plane = &mut dst[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let Some(iy) = g.src_index(oy, ky, g.in_h) else {
                        continue;
                    };
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let prow = &mut plane[iy * g.in_w..(iy + 1) * g.in_w];
                    for (ox, &v) in line.iter().enumerate() {
                        if let Some(ix) = g.src_index(ox, kx, g.in_w) {
                            prow[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Sums per-sample buffers in sample order so results do not depend on scheduling.
fn ordered_sum<T: Real>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for part in parts {
        for (a, p) in acc.iter_mut().zip(part) {
            *a += p;
        }
    }
    acc
}

fn add_bias<T: Real>(out: &mut [T], bias: Option<&[T]>, plane: usize) {
    if let Some(bias) = bias {
        for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
            chunk.iter_mut().for_each(|v| *v += b);
        }
    }
}

fn bias_grad<T: Real>(dy: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for b in 0..batch {
        for (c, d) in db.iter_mut().enumerate() {
            let start = (b * channels + c) * plane;
            *d += dy[start..start + plane].iter().copied().sum::<T>();
        }
    }
    db
}

/// Stride-1 "same" convolution with an odd `k × k` kernel.
pub(crate) struct Conv2d {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl Conv2d {
    fn geometry(&self) -> Geometry {
        Geometry {
            channels: self.cin,
            in_h: self.h,
            in_w: self.w,
            out_h: self.h,
            out_w: self.w,
            k: self.k,
            stride: 1,
            pad: self.k / 2,
        }
    }

    pub fn forward<T: Real>(&self, x: &[T], kernel: &[T], bias: Option<&[T]>) -> Vec<T> {
        let g = self.geometry();
        let (plane, kdim) = (self.h * self.w, g.rows());
        let mut out = vec![T::zero(); self.batch * self.cout * plane];
        out.par_chunks_mut(self.cout * plane)
            .zip(x.par_chunks(self.cin * plane))
            .for_each(|(y, xb)| {
                let owned;
                let cols: &[T] = if self.k == 1 {
                    xb
                } else {
                    let mut buf = vec![T::zero(); kdim * plane];
                    im2col(xb, &g, &mut buf);
                    owned = buf;
                    &owned
                };
                let (kd, pl) = (kdim as isize, plane as isize);
                T::gemm(
                    self.cout, kdim, plane, T::one(), kernel, kd, 1, cols, pl, 1, T::zero(), y,
                    pl, 1,
                );
                add_bias(y, bias, plane);
            });
        out
    }

    /// Returns `(dx, dkernel, dbias)`.
    pub fn backward<T: Real>(&self, x: &[T], kernel: &[T], dy: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let g = self.geometry();
        let (plane, kdim) = (self.h * self.w, g.rows());
        let (kd, pl) = (kdim as isize, plane as isize);
        let mut dx = vec![T::zero(); x.len()];
        let dk_parts: Vec<Vec<T>> = dx
            .par_chunks_mut(self.cin * plane)
            .zip(x.par_chunks(self.cin * plane))
            .zip(dy.par_chunks(self.cout * plane))
            .map(|((dxb, xb), dyb)| {
                let mut dk = vec![T::zero(); self.cout * kdim];
                if self.k == 1 {
                    T::gemm(
                        self.cout, plane, kdim, T::one(), dyb, pl, 1, xb, 1, pl, T::zero(),
                        &mut dk, kd, 1,
                    );
                    T::gemm(
                        kdim, self.cout, plane, T::one(), kernel, 1, kd, dyb, pl, 1, T::zero(),
                        dxb, pl, 1,
                    );
                } else {
                    let mut cols = vec![T::zero(); kdim * plane];
                    im2col(xb, &g, &mut cols);
                    T::gemm(
                        self.cout, plane, kdim, T::one(), dyb, pl, 1, &cols, 1, pl, T::zero(),
                        &mut dk, kd, 1,
                    );
                    T::gemm(
                        kdim, self.cout, plane, T::one(), kernel, 1, kd, dyb, pl, 1, T::zero(),
                        &mut cols, pl, 1,
                    );
                    col2im(&cols, &g, dxb);
                }
                dk
            })
            .collect();
        let dk = ordered_sum(dk_parts, kernel.len());
        let db = bias_grad(dy, self.batch, self.cout, plane);
        (dx, dk, db)
    }
}

/// Stride-2 transposed convolution; kernel layout `[Cin, Cout, k, k]`.
pub(crate) struct ConvTranspose2d {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvTranspose2d {
    pub const STRIDE: usize = 2;

    pub fn out_dims(&self) -> (usize, usize) {
        let f = |n: usize| (n - 1) * Self::STRIDE + self.k + self.out_pad - 2 * self.pad;
        (f(self.h), f(self.w))
    }

    fn geometry(&self) -> Geometry {
        let (oh, ow) = self.out_dims();
        Geometry {
            channels: self.cout,
            in_h: oh,
            in_w: ow,
            out_h: self.h,
            out_w: self.w,
            k: self.k,
            stride: Self::STRIDE,
            pad: self.pad,
        }
    }

    pub fn forward<T: Real>(&self, x: &[T], kernel: &[T], bias: Option<&[T]>) -> Vec<T> {
        let g = self.geometry();
        let (oh, ow) = self.out_dims();
        let (plane, oplane, kdim) = (self.h * self.w, oh * ow, g.rows());
        let (kd, pl) = (kdim as isize, plane as isize);
        let mut out = vec![T::zero(); self.batch * self.cout * oplane];
        out.par_chunks_mut(self.cout * oplane)
            .zip(x.par_chunks(self.cin * plane))
            .for_each(|(y, xb)| {
                let mut cols = vec![T::zero(); kdim * plane];
                // cols[kdim, plane] = kernel^T[kdim, cin] · x[cin, plane]
                T::gemm(
                    kdim, self.cin, plane, T::one(), kernel, 1, kd, xb, pl, 1, T::zero(),
                    &mut cols, pl, 1,
                );
                col2im(&cols, &g, y);
                add_bias(y, bias, oplane);
            });
        out
    }

    pub fn backward<T: Real>(&self, x: &[T], kernel: &[T], dy: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let g = self.geometry();
        let (oh, ow) = self.out_dims();
        let (plane, oplane, kdim) = (self.h * self.w, oh * ow, g.rows());
        let (kd, pl) = (kdim as isize, plane as isize);
        let mut dx = vec![T::zero(); x.len()];
        let dk_parts: Vec<Vec<T>> = dx
            .par_chunks_mut(self.cin * plane)
            .zip(x.par_chunks(self.cin * plane))
            .zip(dy.par_chunks(self.cout * oplane))
            .map(|((dxb, xb), dyb)| {
                let mut cols = vec![T::zero(); kdim * plane];
                im2col(dyb, &g, &mut cols);
                T::gemm(
                    self.cin, kdim, plane, T::one(), kernel, kd, 1, &cols, pl, 1, T::zero(), dxb,
                    pl, 1,
                );
                let mut dk = vec![T::zero(); self.cin * kdim];
                T::gemm(
                    self.cin, plane, kdim, T::one(), xb, pl, 1, &cols, 1, pl, T::zero(), &mut dk,
                    kd, 1,
                );
                dk
            })
            .collect();
        let dk = ordered_sum(dk_parts, kernel.len());
        let db = bias_grad(dy, self.batch, self.cout, oplane);
        (dx, dk, db)
    }
}
