//! Same-padded dilated 2-D convolution kernels (im2col + GEMM).

use rayon::prelude::*;

use crate::tensor::{matmul, Layout, Scalar};

/// Geometry of one convolution call. Output spatial size equals input size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1
    }

    /// Range of output columns `ox` whose tap at column offset `off` reads
    /// inside the image, with `ix = ox + off`.
    fn valid_span(len: usize, off: isize) -> (usize, usize) {
        let lo = (-off).max(0) as usize;
        let hi = (len as isize - off).clamp(0, len as isize) as usize;
        (lo.min(hi), hi)
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (h, w, k, d) = (g.height, g.width, g.kernel, g.dilation);
    let pad = g.pad() as isize;
    let plane = g.plane();
    for c in 0..g.in_ch {
        let src = &x[c * plane..(c + 1) * plane];
        for ki in 0..k {
            let dy = (ki * d) as isize - pad;
            for kj in 0..k {
                let dx = (kj * d) as isize - pad;
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let (x_lo, x_hi) = ConvGeom::valid_span(w, dx);
                for oy in 0..h {
                    let out = &mut dst[oy * w..(oy + 1) * w];
                    let iy = oy as isize + dy;
                    if iy < 0 || iy >= h as isize || x_lo >= x_hi {
                        out.fill(T::zero());
                        continue;
                    }
                    let base = iy as usize * w;
                    out[..x_lo].fill(T::zero());
                    let s0 = (x_lo as isize + dx) as usize;
                    out[x_lo..x_hi].copy_from_slice(&src[base + s0..base + s0 + (x_hi - x_lo)]);
                    out[x_hi..].fill(T::zero());
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let (h, w, k, d) = (g.height, g.width, g.kernel, g.dilation);
    let pad = g.pad() as isize;
    let plane = g.plane();
    for c in 0..g.in_ch {
        let dst = &mut x[c * plane..(c + 1) * plane];
        for ki in 0..k {
            let dy = (ki * d) as isize - pad;
            for kj in 0..k {
                let dx = (kj * d) as isize - pad;
                let row = (c * k + ki) * k + kj;
                let src = &col[row * plane..(row + 1) * plane];
                let (x_lo, x_hi) = ConvGeom::valid_span(w, dx);
                if x_lo >= x_hi {
                    continue;
                }
                for oy in 0..h {
                    let iy = oy as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    let s0 = (x_lo as isize + dx) as usize;
                    let target = &mut dst[base + s0..base + s0 + (x_hi - x_lo)];
                    for (t, &v) in target.iter_mut().zip(&src[oy * w + x_lo..oy * w + x_hi]) {
                        *t = *t + v;
                    }
                }
            }
        }
    }
}

/// Forward pass: returns an `N×out_ch×H×W` buffer.
pub(crate) fn forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let plane = g.plane();
    let in_len = g.in_ch * plane;
    let out_len = g.out_ch * plane;
    let kk = g.patch_len();
    let mut out = vec![T::zero(); g.batch * out_len];
    out.par_chunks_mut(out_len.max(1))
        .zip(x.par_chunks(in_len.max(1)))
        .for_each(|(y, xn)| {
            if g.is_pointwise() {
                matmul(
                    weight,
                    Layout::Normal,
                    xn,
                    Layout::Normal,
                    y,
                    g.out_ch,
                    kk,
                    plane,
                    false,
                );
            } else {
                let mut col = vec![T::zero(); kk * plane];
                im2col(xn, g, &mut col);
                matmul(
                    weight,
                    Layout::Normal,
                    &col,
                    Layout::Normal,
                    y,
                    g.out_ch,
                    kk,
                    plane,
                    false,
                );
            }
            if let Some(b) = bias {
                for (row, &bv) in y.chunks_mut(plane).zip(b) {
                    row.iter_mut().for_each(|v| *v = *v + bv);
                }
            }
        });
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

/// Backward pass. Per-item weight gradients are reduced in batch order so the
/// result does not depend on the number of worker threads.
pub(crate) fn backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeom,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let plane = g.plane();
    let in_len = g.in_ch * plane;
    let out_len = g.out_ch * plane;
    let kk = g.patch_len();

    let per_item: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..g.batch)
        .into_par_iter()
        .map(|n| {
            let xn = &x[n * in_len..(n + 1) * in_len];
            let dy = &dout[n * out_len..(n + 1) * out_len];
            let col_owned;
            let col: &[T] = if g.is_pointwise() {
                xn
            } else if need_weight {
                let mut c = vec![T::zero(); kk * plane];
                im2col(xn, g, &mut c);
                col_owned = c;
                &col_owned
            } else {
                &[]
            };
            let dw = need_weight.then(|| {
                let mut dw = vec![T::zero(); g.out_ch * kk];
                matmul(
                    dy,
                    Layout::Normal,
                    col,
                    Layout::Transposed,
                    &mut dw,
                    g.out_ch,
                    plane,
                    kk,
                    false,
                );
                dw
            });
            let dx = need_input.then(|| {
                if g.is_pointwise() {
                    let mut dx = vec![T::zero(); in_len];
                    matmul(
                        weight,
                        Layout::Transposed,
                        dy,
                        Layout::Normal,
                        &mut dx,
                        kk,
                        g.out_ch,
                        plane,
                        false,
                    );
                    dx
                } else {
                    let mut dcol = vec![T::zero(); kk * plane];
                    matmul(
                        weight,
                        Layout::Transposed,
                        dy,
                        Layout::Normal,
                        &mut dcol,
                        kk,
                        g.out_ch,
                        plane,
                        false,
                    );
                    let mut dx = vec![T::zero(); in_len];
                    col2im(&dcol, g, &mut dx);
                    dx
                }
            });
            (dx, dw)
        })
        .collect();

    let mut input = need_input.then(|| Vec::with_capacity(g.batch * in_len));
    let mut weight_grad = need_weight.then(|| vec![T::zero(); g.out_ch * kk]);
    for (dx, dw) in per_item {
        if let (Some(acc), Some(dx)) = (input.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
        if let (Some(acc), Some(dw)) = (weight_grad.as_mut(), dw) {
            acc.iter_mut().zip(&dw).for_each(|(a, &v)| *a = *a + v);
        }
    }
    let bias = need_bias.then(|| {
        let mut db = vec![T::zero(); g.out_ch];
        for n in 0..g.batch {
            for (o, acc) in db.iter_mut().enumerate() {
                let row = &dout[n * out_len + o * plane..n * out_len + (o + 1) * plane];
                *acc = *acc + row.iter().copied().sum::<T>();
            }
        }
        db
    });
    ConvGrads {
        input,
        weight: weight_grad,
        bias,
    }
}
